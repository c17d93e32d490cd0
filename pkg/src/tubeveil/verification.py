"""Finite-difference verification suite.

Each entry builds small random instances of one differentiable piece of
the pipeline (a primitive, a loss, or a composite stack) and compares
the tape's gradient against central differences.  Tolerances follow the
engine's dtype: 1e-3 in float32, 1e-6 in float64.

Discrete decisions need care: the straight-through estimator is not the
local derivative of the hard forward, so its check runs on the soft
relaxation, and the composite stacks are checked with decisions frozen
as constant inputs (which is exactly how they behave between decision
flips).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    RngState,
    Tensor,
    gelu,
    grad_check,
    layer_norm,
    log,
    log_softmax,
    masked_mean,
    reduce_mean,
    reduce_sum,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    softplus,
)
from .engine.gradcheck import GradCheckReport
from .attention import init_recognizer_params, masked_self_attention, run_layer_stack, vit_classify
from .anonymizer import anonymize_tokens, init_anonymizer_params
from .model import ModelSettings, forward_transform, init_model_params
from .objectives import LossWeights, action_loss, adversarial_objective, privacy_loss
from .params import ParamDict, init_transformer_layer
from .sparsifier import (
    SparsifierSettings,
    init_sparsifier_params,
    multi_level_aggregate,
    predict_keep_probs,
    sparsification_loss,
)
from .tokenizer import TubeletLayout

__all__ = ["SuiteEntry", "run_suite", "SUITE_NAMES"]


@dataclass
class SuiteEntry:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    instances: int


def _scalar(x: Tensor) -> Tensor:
    return reduce_sum(x * x) if x.ndim else x * x


def _sum(x: Tensor) -> Tensor:
    return reduce_sum(x)


def _rand_mask(rng: RngState, shape) -> np.ndarray:
    m = (rng.uniform(shape, dtype=np.float64) < 0.7).astype(np.float64)
    flat = m.reshape(m.shape[0], -1)
    flat[:, 0] = 1.0          # keep one token per sample alive
    return m


def _check_many(fn_builder, instances: int, dtype, tol: float, rng: RngState) -> tuple[float, int]:
    worst = 0.0
    for i in range(instances):
        fn, point = fn_builder(rng.child(f"inst{i}"))
        report = grad_check(fn, point.astype(dtype), tol=tol, dtype=dtype)
        worst = max(worst, report.max_rel_err)
    return worst, instances


def _suite_builders(drng: RngState):
    """name -> callable(rng) -> (fn, point ndarray). Shapes stay tiny."""
    layout = TubeletLayout(1, 2, 2)
    d = 6
    heads = 2
    builders = {}

    def simple(name, f, shape):
        builders[name] = lambda r: (f, r.normal(shape, dtype=np.float64))

    simple("softmax", lambda x: _sum(softmax(x) * softmax(x)), (3, 5))
    simple("log_softmax", lambda x: _scalar(log_softmax(x)), (3, 5))
    simple("gelu", lambda x: _scalar(gelu(x)), (4, 3))
    simple("sigmoid", lambda x: _scalar(sigmoid(x)), (4, 3))
    simple("softplus", lambda x: _scalar(softplus(x)), (4, 3))

    def build_layer_norm(r):
        # wide rows with spread well above the probe step keep the
        # normalization's curvature out of the finite-difference error
        g = Tensor(r.child("g").normal((12,), std=0.3, dtype=np.float64) + 1.0)
        b = Tensor(r.child("b").normal((12,), dtype=np.float64))
        return (lambda x: _scalar(layer_norm(x, g, b))), \
            r.child("x").normal((3, 12), std=3.0, dtype=np.float64)
    builders["layer_norm"] = build_layer_norm

    def build_masked_mean(r):
        mask = Tensor(_rand_mask(r.child("m"), (2, 6))[..., None])
        return (lambda x: _scalar(masked_mean(x, mask, axis=1, keepdims=True))), \
            r.child("x").normal((2, 6, 4), dtype=np.float64)
    builders["masked_mean"] = build_masked_mean

    def build_attention(r):
        params: ParamDict = {}
        init_transformer_layer(params, "t", d, r.child("init"))
        for p in params.values():
            p.data = p.data.astype(np.float64)
        dec = Tensor(_rand_mask(r.child("dec"), (2, 5)))
        return (lambda x: _scalar(masked_self_attention(x, dec, params, "t", heads))), \
            r.child("x").normal((2, 5, d), dtype=np.float64)
    builders["masked_attention"] = build_attention

    def build_layer_stack(r):
        params: ParamDict = {}
        for i in range(2):
            init_transformer_layer(params, f"t.layers.{i}", d, r.child(f"l{i}"))
        for p in params.values():
            p.data = p.data.astype(np.float64)
        dec = Tensor(_rand_mask(r.child("dec"), (1, 6)))
        return (lambda x: _scalar(run_layer_stack(x, dec, params, "t", 2, heads))), \
            r.child("x").normal((1, 6, d), dtype=np.float64)
    builders["transformer_stack"] = build_layer_stack

    def build_aggregate(r):
        st = SparsifierSettings(blocks=1, layers_per_block=1, heads=heads)
        params = init_sparsifier_params(r.child("init"), d, st, prefix="s")
        for p in params.values():
            p.data = p.data.astype(np.float64)
        dec = Tensor(_rand_mask(r.child("dec"), (1, 2, 4)).reshape(1, 2, 4))
        return (lambda x: _scalar(multi_level_aggregate(x, dec, params, "s.0"))), \
            r.child("x").normal((1, 2, 4, d), dtype=np.float64)
    builders["evidence_aggregation"] = build_aggregate

    def build_keep_head(r):
        # wider width and boosted weights: the default tiny init makes the
        # true gradient vanish below finite-difference noise
        dk = 12
        st = SparsifierSettings(blocks=1, layers_per_block=1, heads=heads)
        params = init_sparsifier_params(r.child("init"), dk, st, prefix="s")
        for p in params.values():
            p.data = p.data.astype(np.float64)
            if p.data.ndim == 2:
                p.data *= 15.0
        return (lambda x: _scalar(predict_keep_probs(x, params, "s.0"))), \
            r.child("x").normal((1, 2, 4, dk), dtype=np.float64)
    builders["keep_probability_head"] = build_keep_head

    def build_gumbel_soft(r):
        noise = r.child("g").gumbel((2, 3, 2), dtype=np.float64)
        tau = 0.7

        def fn(z_logits):
            z = softmax(z_logits)
            soft = softmax((Tensor(noise) + log(z)) * (1.0 / tau))
            return _scalar(soft)
        return fn, r.child("x").normal((2, 3, 2), dtype=np.float64)
    builders["gumbel_relaxation"] = build_gumbel_soft

    def build_spars_loss(r):
        def fn(x):
            frac = sigmoid(x)          # differentiable stand-in for decisions
            return sparsification_loss([frac], 0.7)
        return fn, r.normal((1, 2, 4), dtype=np.float64)
    builders["sparsification_loss"] = build_spars_loss

    def build_action_loss(r):
        labels = np.array([0, 2, 1])
        return (lambda x: action_loss(x, labels)), r.normal((3, 4), dtype=np.float64)
    builders["action_cross_entropy"] = build_action_loss

    def build_privacy_loss(r):
        labels = (r.uniform((3, 3), dtype=np.float64) < 0.5).astype(np.float64)
        return (lambda x: privacy_loss(x, labels)), r.child("x").normal((3, 3), dtype=np.float64)
    builders["privacy_bce"] = build_privacy_loss

    def build_adversarial(r):
        labels = np.array([1, 0])
        plabels = np.array([[1.0, 0.0], [0.0, 1.0]])

        def fn(x):
            a_logits = slice_axis(x, 1, 0, 3)
            p_logits = slice_axis(x, 1, 3, 5)
            spars = _scalar(reduce_mean(x))
            return adversarial_objective(spars, action_loss(a_logits, labels),
                                         privacy_loss(p_logits, plabels), LossWeights())
        return fn, r.normal((2, 5), dtype=np.float64)
    builders["adversarial_objective"] = build_adversarial

    def build_anonymizer(r):
        params = init_anonymizer_params(r.child("init"), d, layout.patch_len, layers=1, prefix="a")
        for p in params.values():
            p.data = p.data.astype(np.float64)
        dec = Tensor(_rand_mask(r.child("dec"), (1, 2, 4)).reshape(1, 2, 4))

        def fn(x):
            video = anonymize_tokens(x, dec, params, layout, (2, 4, 4), prefix="a",
                                     layers=1, heads=heads)
            return _scalar(video * 0.5)    # keep values inside the clamp's linear region
        return fn, r.child("x").normal((1, 2, 4, d), std=0.3, dtype=np.float64)
    builders["anonymizer_stack"] = build_anonymizer

    def build_full_stack(r):
        st = SparsifierSettings(blocks=2, layers_per_block=1, heads=heads)
        ms = ModelSettings(layout=layout, video_shape=(2, 4, 4), d=d, heads=heads,
                           anon_layers=1, spars=st)
        params = init_model_params(r.child("init"), ms)
        for p in params.values():
            p.data = p.data.astype(np.float64)
        forced = [_rand_mask(r.child(f"dec{m}"), (1, 8)).reshape(1, 2, 4) for m in range(2)]

        def fn(video):
            out = forward_transform(params, ms, video, train=True, forced_decisions=forced)
            return _scalar(out.video * 0.5)
        return fn, r.child("x").uniform((1, 2, 4, 4, 3), lo=0.25, hi=0.75, dtype=np.float64)
    builders["sparsifier_anonymizer_pipeline"] = build_full_stack

    def build_classifier(r):
        params = init_recognizer_params(r.child("init"), layout, (2, 4, 4), d, 1, 3, prefix="rec")
        for p in params.values():
            p.data = p.data.astype(np.float64)
            if p.data.ndim == 2:
                p.data *= 10.0
        labels = np.array([1])

        def fn(video):
            return action_loss(vit_classify(video, params, "rec", layout, 1, heads), labels)
        return fn, r.child("x").uniform((1, 2, 4, 4, 3), dtype=np.float64)
    builders["recognizer_classifier"] = build_classifier

    return builders


SUITE_NAMES = tuple(_suite_builders(RngState(0)).keys())


def run_suite(instances: int = 20, dtype=np.float32, names=None, seed: int = 2024) -> list[SuiteEntry]:
    """Run the gradient suite; one entry per checked component."""
    dtype = np.dtype(dtype)
    tol = 1e-3 if dtype == np.float32 else 1e-6
    rng = RngState(seed)
    builders = _suite_builders(rng.child("shapes"))
    if names is not None:
        unknown = set(names) - set(builders)
        if unknown:
            raise ValueError(f"unknown suite entries: {sorted(unknown)}")
        builders = {k: builders[k] for k in names}
    entries = []
    for name, builder in builders.items():
        worst, count = _check_many(builder, instances, dtype, tol, rng.child(name))
        entries.append(SuiteEntry(name=name, max_rel_err=worst, tol=tol,
                                  passed=worst <= tol, instances=count))
    return entries
