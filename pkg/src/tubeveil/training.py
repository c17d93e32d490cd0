"""The three-phase optimization protocol.

Phase 1 teaches the sparsifier to keep action-relevant tokens: the
sparsification target loss plus a cross-entropy through a temporary
linear head on the pooled surviving tokens.  Phase 2 alternates, per
batch, recognizer updates on detached transformed videos with a model
update that pushes action accuracy up and privacy accuracy down through
the frozen recognizers.  Phase 3 freezes the transform, rebuilds
recognizers from scratch on the transformed training split and measures
what survived.
"""

from __future__ import annotations

import numpy as np

from .engine import RngState, Tensor, backward, reshape, zero_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PhasePlan
from .metrics import MetricsReport, cmap, f1, per_attribute_f1, top1_accuracy, average_precision
from .model import ModelSettings, forward_sparsify, forward_transform
from .objectives import (
    LossWeights,
    action_loss,
    adversarial_objective,
    init_objective,
    privacy_loss,
)
from .optim import AdamW, cosine_lr
from .params import ParamDict, add_param, init_linear, params_checksum
from .recognizers import RecognizerSpec, build_recognizer, recognize, video_scores
from .sparsifier import sparsification_loss
from .engine.tensor import masked_mean

__all__ = ["run_phase_init", "run_phase_adversarial", "run_phase_eval",
           "train_recognizer", "transform_dataset", "load_phase_state",
           "TrainingError"]


class TrainingError(RuntimeError):
    pass


def _epoch_batches(n: int, batch_size: int, rng: RngState):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _pool_tokens(tokens: Tensor, decision: Tensor) -> Tensor:
    """Masked mean over all token positions: (B, L, N, D) -> (B, D)."""
    b, l, n, d = tokens.shape
    mask = reshape(decision, (b, l, n, 1))
    return reshape(masked_mean(tokens, mask, axis=(1, 2), keepdims=True), (b, d))


def _save_epoch(checkpoint_dir, phase: str, epoch: int, params: ParamDict,
                opt: AdamW, rng: RngState, config_snapshot: dict | None) -> None:
    if checkpoint_dir is None:
        return
    tensors: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    tensors.update(opt.state_arrays())
    meta = {
        "phase": phase,
        "epoch": epoch,
        "step_count": opt.step_count,
        "rng": rng.get_state(),
        "config": config_snapshot or {},
    }
    save_checkpoint(f"{checkpoint_dir}/{phase}_epoch{epoch:03d}.ckpt", tensors, meta)


def load_phase_state(path) -> tuple[ParamDict, dict]:
    """Read a phase checkpoint back into trainable parameters.

    Returns the model parameter dict (optimizer moment arrays are
    dropped; each phase builds a fresh optimizer) and the metadata,
    whose "config" entry reconstructs the settings the run used.
    """
    ckpt = load_checkpoint(path)
    params: ParamDict = {k: Tensor(v, requires_grad=True)
                         for k, v in ckpt.tensors.items()
                         if not k.startswith("opt.")}
    if not params:
        raise TrainingError(f"checkpoint {path} holds no model parameters")
    return params, ckpt.metadata


def run_phase_init(
    params: ParamDict,
    settings: ModelSettings,
    videos: np.ndarray,
    action_labels: np.ndarray,
    n_classes: int,
    plan: PhasePlan,
    rng: RngState,
    checkpoint_dir=None,
    config_snapshot: dict | None = None,
) -> dict:
    """Train sparsifier + embedding on kept-ratio targets and a temp action head.

    The helper head is created here and thrown away at return; anonymizer
    parameters ride along in the optimizer (weight decay only) so every
    model tensor has optimizer state from the start.
    """
    if len(videos) == 0:
        raise TrainingError("no training data")
    head: ParamDict = {}
    init_linear(head, "tmp_head", settings.d, n_classes, rng.child("tmp_head"))
    opt = AdamW(dict(params, **head), lr=plan.base_lr, weight_decay=plan.weight_decay)
    all_params = dict(params, **head)
    n = len(videos)
    total_steps = plan.epochs * ((n + plan.batch_size - 1) // plan.batch_size)
    history = {"loss": [], "spars": [], "action": []}
    step = 0
    for epoch in range(plan.epochs):
        erng = rng.child(f"epoch{epoch}")
        for bi, idx in enumerate(_epoch_batches(n, plan.batch_size, erng.child("order"))):
            batch = Tensor(videos[idx])
            tokens, decisions, _ = forward_sparsify(
                params, settings, batch, rng=erng.child(f"gumbel{bi}"), train=True)
            s_loss = sparsification_loss(decisions, settings.spars.alpha)
            pooled = _pool_tokens(tokens, decisions[-1])
            logits = (pooled @ head["tmp_head.w"]) + head["tmp_head.b"]
            a_loss = action_loss(logits, action_labels[idx])
            loss = init_objective(s_loss, a_loss)
            grads = backward(loss, all_params)
            opt.step(grads, lr=cosine_lr(step, total_steps, plan.base_lr))
            zero_grads(all_params.values())
            history["loss"].append(float(loss.data))
            history["spars"].append(float(s_loss.data))
            history["action"].append(float(a_loss.data))
            step += 1
        _save_epoch(checkpoint_dir, "init", epoch, params, opt, rng, config_snapshot)
    return history


def run_phase_adversarial(
    params: ParamDict,
    settings: ModelSettings,
    videos: np.ndarray,
    action_labels: np.ndarray,
    privacy_labels: np.ndarray,
    action_spec: RecognizerSpec,
    privacy_spec: RecognizerSpec,
    plan: PhasePlan,
    rng: RngState,
    weights: LossWeights = LossWeights(),
    checkpoint_dir=None,
    config_snapshot: dict | None = None,
    isolation_probe: list | None = None,
) -> dict:
    """Alternate recognizer updates and adversarial model updates, 1:1.

    Recognizers are built fresh here.  Per batch: (a) both recognizers
    update on the detached transformed batch; (b) the model updates
    through the now-frozen recognizers.  `isolation_probe`, if given,
    collects parameter checksums around the first batch so tests can
    assert nothing moves outside the component being updated.
    """
    rec_a = build_recognizer(action_spec, rng.child("rec_action"), prefix="rec_a")
    rec_p = build_recognizer(privacy_spec, rng.child("rec_privacy"), prefix="rec_p")
    opt_model = AdamW(params, lr=plan.base_lr, weight_decay=plan.weight_decay)
    opt_a = AdamW(rec_a, lr=plan.base_lr, weight_decay=plan.weight_decay)
    opt_p = AdamW(rec_p, lr=plan.base_lr, weight_decay=plan.weight_decay)
    n = len(videos)
    total_steps = plan.epochs * ((n + plan.batch_size - 1) // plan.batch_size)
    history = {"objective": [], "rec_action": [], "rec_privacy": [],
               "model_action": [], "model_privacy": [], "spars": []}
    step = 0
    for epoch in range(plan.epochs):
        erng = rng.child(f"epoch{epoch}")
        for bi, idx in enumerate(_epoch_batches(n, plan.batch_size, erng.child("order"))):
            batch = Tensor(videos[idx])
            lr = cosine_lr(step, total_steps, plan.base_lr)
            out = forward_transform(params, settings, batch,
                                    rng=erng.child(f"gumbel{bi}"), train=True)

            # (a) recognizers learn the current transform's output
            if isolation_probe is not None and step == 0:
                isolation_probe.append(("model_before_a", params_checksum(params)))
            detached = Tensor(out.video.data)
            la = action_loss(recognize(rec_a, action_spec, detached, prefix="rec_a"),
                             action_labels[idx])
            ga = backward(la, rec_a)
            opt_a.step(ga, lr=lr)
            zero_grads(rec_a.values())
            lp = privacy_loss(recognize(rec_p, privacy_spec, detached, prefix="rec_p"),
                              privacy_labels[idx])
            gp = backward(lp, rec_p)
            opt_p.step(gp, lr=lr)
            zero_grads(rec_p.values())
            if isolation_probe is not None and step == 0:
                isolation_probe.append(("model_after_a", params_checksum(params)))
                isolation_probe.append(("recs_before_b",
                                        params_checksum(dict(rec_a, **rec_p))))

            # (b) model update through the frozen recognizers
            s_loss = sparsification_loss(out.decisions, settings.spars.alpha)
            ma = action_loss(recognize(rec_a, action_spec, out.video, prefix="rec_a"),
                             action_labels[idx])
            mp = privacy_loss(recognize(rec_p, privacy_spec, out.video, prefix="rec_p"),
                              privacy_labels[idx])
            objective = adversarial_objective(s_loss, ma, mp, weights)
            gm = backward(objective, params)
            opt_model.step(gm, lr=lr)
            zero_grads(params.values())
            zero_grads(rec_a.values())
            zero_grads(rec_p.values())
            if isolation_probe is not None and step == 0:
                isolation_probe.append(("recs_after_b",
                                        params_checksum(dict(rec_a, **rec_p))))

            history["objective"].append(float(objective.data))
            history["rec_action"].append(float(la.data))
            history["rec_privacy"].append(float(lp.data))
            history["model_action"].append(float(ma.data))
            history["model_privacy"].append(float(mp.data))
            history["spars"].append(float(s_loss.data))
            step += 1
        _save_epoch(checkpoint_dir, "adversarial", epoch, params, opt_model, rng,
                    config_snapshot)
    return history


def transform_dataset(params: ParamDict, settings: ModelSettings, videos: np.ndarray,
                      batch_size: int = 16) -> tuple[np.ndarray, list[int]]:
    """Eval-mode transform of every video; returns pixels and retained counts."""
    outs = []
    counts: list[int] = []
    for i in range(0, len(videos), batch_size):
        res = forward_transform(params, settings, Tensor(videos[i:i + batch_size]), train=False)
        outs.append(res.video.data.astype(np.float32))
        if not counts:
            counts = res.retained_counts
    return np.concatenate(outs, axis=0), counts


def train_recognizer(
    spec: RecognizerSpec,
    videos: np.ndarray,
    labels: np.ndarray,
    plan: PhasePlan,
    rng: RngState,
    prefix: str = "rec",
) -> tuple[ParamDict, dict]:
    """From-scratch recognizer training; labels pair with the spec's kind."""
    params = build_recognizer(spec, rng.child("build"), prefix=prefix)
    opt = AdamW(params, lr=plan.base_lr, weight_decay=plan.weight_decay)
    n = len(videos)
    total_steps = plan.epochs * ((n + plan.batch_size - 1) // plan.batch_size)
    history = {"loss": []}
    step = 0
    for epoch in range(plan.epochs):
        erng = rng.child(f"epoch{epoch}")
        for idx in _epoch_batches(n, plan.batch_size, erng.child("order")):
            logits = recognize(params, spec, Tensor(videos[idx]), prefix=prefix)
            if spec.kind == "action":
                loss = action_loss(logits, labels[idx])
            elif spec.kind == "video-privacy":
                loss = privacy_loss(logits, labels[idx])
            else:
                b, t, p = logits.shape
                frame_labels = np.repeat(labels[idx], t, axis=0)
                loss = privacy_loss(reshape(logits, (b * t, p)), frame_labels)
            grads = backward(loss, params)
            opt.step(grads, lr=cosine_lr(step, total_steps, plan.base_lr))
            zero_grads(params.values())
            history["loss"].append(float(loss.data))
            step += 1
    return params, history


def _batched_scores(params: ParamDict, spec: RecognizerSpec, videos: np.ndarray,
                    prefix: str, batch_size: int = 16) -> np.ndarray:
    rows = []
    for i in range(0, len(videos), batch_size):
        rows.append(video_scores(params, spec, Tensor(videos[i:i + batch_size]), prefix=prefix))
    return np.concatenate(rows, axis=0)


def _batched_logits(params: ParamDict, spec: RecognizerSpec, videos: np.ndarray,
                    prefix: str, batch_size: int = 16) -> np.ndarray:
    rows = []
    for i in range(0, len(videos), batch_size):
        rows.append(recognize(params, spec, Tensor(videos[i:i + batch_size]),
                              prefix=prefix).data)
    return np.concatenate(rows, axis=0)


def evaluate_recognizers(
    action_params: ParamDict,
    action_spec: RecognizerSpec,
    privacy_params: ParamDict,
    privacy_spec: RecognizerSpec,
    test_videos: np.ndarray,
    test_actions: np.ndarray,
    test_privacy: np.ndarray,
    attribute_names: list[str] | None = None,
    seed: int = 0,
    config_snapshot: dict | None = None,
) -> MetricsReport:
    logits = _batched_logits(action_params, action_spec, test_videos, "rec")
    scores = _batched_scores(privacy_params, privacy_spec, test_videos, "rec")
    aps = [average_precision(scores[:, a], test_privacy[:, a]) * 100.0
           for a in range(scores.shape[1]) if test_privacy[:, a].sum() > 0]
    report = MetricsReport(
        top1=top1_accuracy(logits, test_actions),
        cmap=cmap(scores, test_privacy),
        f1=f1(scores, test_privacy),
        per_class_ap=aps,
        per_class_f1=per_attribute_f1(scores, test_privacy),
        attribute_names=list(attribute_names or []),
        config=config_snapshot or {},
        seed=seed,
    )
    report.validate()
    return report


def run_phase_eval(
    params: ParamDict,
    settings: ModelSettings,
    train_videos: np.ndarray,
    train_actions: np.ndarray,
    train_privacy: np.ndarray,
    test_videos: np.ndarray,
    test_actions: np.ndarray,
    test_privacy: np.ndarray,
    action_spec: RecognizerSpec,
    privacy_spec: RecognizerSpec,
    plan: PhasePlan,
    rng: RngState,
    frame_spec: RecognizerSpec | None = None,
    attribute_names: list[str] | None = None,
    seed: int = 0,
    config_snapshot: dict | None = None,
) -> dict:
    """Freeze the transform, retrain recognizers on its output, measure.

    Returns the headline report plus transformed arrays, retained
    counts, and (optionally) the frame-level privacy metrics.
    """
    t_train, counts = transform_dataset(params, settings, train_videos)
    t_test, _ = transform_dataset(params, settings, test_videos)
    rec_a, _ = train_recognizer(action_spec, t_train, train_actions, plan, rng.child("eval_action"))
    rec_p, _ = train_recognizer(privacy_spec, t_train, train_privacy, plan, rng.child("eval_privacy"))
    report = evaluate_recognizers(rec_a, action_spec, rec_p, privacy_spec,
                                  t_test, test_actions, test_privacy,
                                  attribute_names=attribute_names, seed=seed,
                                  config_snapshot=config_snapshot)
    result = {
        "report": report,
        "retained_counts": counts,
        "transformed_train": t_train,
        "transformed_test": t_test,
    }
    if frame_spec is not None:
        rec_f, _ = train_recognizer(frame_spec, t_train, train_privacy, plan,
                                    rng.child("eval_frame"))
        scores = _batched_scores(rec_f, frame_spec, t_test, "rec")
        result["frame_privacy"] = {
            "cmap": cmap(scores, test_privacy),
            "f1": f1(scores, test_privacy),
        }
    return result
