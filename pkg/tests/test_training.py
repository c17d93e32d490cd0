"""Three-phase protocol mechanics on tiny synthetic batches."""

import numpy as np
import pytest

from tubeveil.checkpoint import load_checkpoint, save_checkpoint
from tubeveil.config import PhasePlan
from tubeveil.engine import RngState, Tensor
from tubeveil.model import ModelSettings, init_model_params
from tubeveil.params import params_checksum
from tubeveil.recognizers import RecognizerSpec
from tubeveil.sparsifier import SparsifierSettings
from tubeveil.tokenizer import TubeletLayout
from tubeveil.training import (
    TrainingError,
    evaluate_recognizers,
    load_phase_state,
    run_phase_adversarial,
    run_phase_eval,
    run_phase_init,
    train_recognizer,
    transform_dataset,
)

SETTINGS = ModelSettings(
    layout=TubeletLayout(dt=2, dh=4, dw=4),
    video_shape=(4, 8, 8),
    d=12,
    heads=2,
    anon_layers=1,
    spars=SparsifierSettings(alpha=0.5, blocks=2, layers_per_block=1, heads=2),
)
PLAN = PhasePlan(name="t", epochs=2, batch_size=4, base_lr=1e-3)


def recognizer_spec(kind, n_out):
    layout = TubeletLayout(1, 4, 4) if kind == "frame-privacy" else TubeletLayout(2, 4, 4)
    return RecognizerSpec(kind=kind, n_out=n_out, layout=layout, video_shape=(4, 8, 8),
                          d=12, layers=1, heads=2)


def tiny_data(n=8, seed=0):
    """Videos whose brightness half encodes the action and whose first
    pixel encodes one privacy flag: linearly separable on purpose."""
    rng = RngState(seed)
    videos = rng.child("v").uniform((n, 4, 8, 8, 3), lo=0.3, hi=0.5).astype(np.float32)
    actions = np.arange(n) % 2
    privacy = np.zeros((n, 2), dtype=np.int64)
    privacy[:, 0] = (np.arange(n) // 2) % 2
    privacy[:, 1] = 1 - privacy[:, 0]
    videos[actions == 1, :, :4] += 0.4
    videos[privacy[:, 0] == 1, :, :, :2] = 0.95
    return np.clip(videos, 0, 1), actions, privacy


def test_phase_init_trains_and_checkpoints(tmp_path):
    videos, actions, _ = tiny_data()
    params = init_model_params(RngState(0).child("m"), SETTINGS)
    before = params_checksum(params)
    hist = run_phase_init(params, SETTINGS, videos, actions, 2, PLAN,
                          RngState(0).child("p1"), checkpoint_dir=tmp_path,
                          config_snapshot={"tag": 1})
    assert set(hist) == {"loss", "spars", "action"}
    assert len(hist["loss"]) == 2 * 2
    assert params_checksum(params) != before
    # the temporary action head does not leak into the model parameters
    assert not any("tmp_head" in k for k in params)

    ckpt = load_checkpoint(tmp_path / "init_epoch001.ckpt")
    assert ckpt.metadata["phase"] == "init"
    assert ckpt.metadata["epoch"] == 1
    assert ckpt.metadata["config"] == {"tag": 1}
    assert "model.embed.w" in ckpt.tensors
    assert any(k.startswith("opt.m.") for k in ckpt.tensors)


def test_phase_init_requires_data():
    params = init_model_params(RngState(0).child("m"), SETTINGS)
    with pytest.raises(TrainingError, match="no training data"):
        run_phase_init(params, SETTINGS, np.zeros((0, 4, 8, 8, 3)), np.zeros(0),
                       2, PLAN, RngState(0).child("p"))


def test_phase_init_deterministic():
    videos, actions, _ = tiny_data()
    results = []
    for _ in range(2):
        params = init_model_params(RngState(0).child("m"), SETTINGS)
        run_phase_init(params, SETTINGS, videos, actions, 2, PLAN, RngState(0).child("p1"))
        results.append(params_checksum(params))
    assert results[0] == results[1]


def test_adversarial_phase_isolation():
    """Step (a) must not move the model; step (b) must not move the
    recognizers."""
    videos, actions, privacy = tiny_data()
    params = init_model_params(RngState(0).child("m"), SETTINGS)
    probe: list = []
    hist = run_phase_adversarial(
        params, SETTINGS, videos, actions, privacy,
        recognizer_spec("action", 2), recognizer_spec("video-privacy", 2),
        PLAN, RngState(0).child("p2"), isolation_probe=probe)
    stages = dict(probe)
    assert stages["model_before_a"] == stages["model_after_a"]
    assert stages["recs_before_b"] == stages["recs_after_b"]
    assert set(hist) == {"objective", "rec_action", "rec_privacy",
                         "model_action", "model_privacy", "spars"}
    assert len(hist["objective"]) == 4


def test_transform_dataset_batches_consistently():
    videos, _, _ = tiny_data(n=6)
    params = init_model_params(RngState(0).child("m"), SETTINGS)
    all_at_once, counts = transform_dataset(params, SETTINGS, videos, batch_size=6)
    in_pairs, counts2 = transform_dataset(params, SETTINGS, videos, batch_size=2)
    assert all_at_once.shape == videos.shape
    assert all_at_once.dtype == np.float32
    assert counts == counts2 == [4, 2]
    np.testing.assert_allclose(all_at_once, in_pairs, atol=1e-6)


def test_train_recognizer_learns_separable_data():
    videos, actions, _ = tiny_data(n=16)
    plan = PhasePlan(name="t", epochs=12, batch_size=4, base_lr=2e-3)
    spec = recognizer_spec("action", 2)
    params, hist = train_recognizer(spec, videos, actions, plan, RngState(0).child("r"))
    assert np.mean(hist["loss"][-4:]) < np.mean(hist["loss"][:4])
    from tubeveil.training import _batched_logits
    logits = _batched_logits(params, spec, videos, "rec")
    assert (logits.argmax(1) == actions).mean() >= 0.9


def test_evaluate_recognizers_report():
    videos, actions, privacy = tiny_data(n=8)
    aspec = recognizer_spec("action", 2)
    pspec = recognizer_spec("video-privacy", 2)
    ra, _ = train_recognizer(aspec, videos, actions, PLAN, RngState(0).child("a"))
    rp, _ = train_recognizer(pspec, videos, privacy, PLAN, RngState(0).child("p"))
    report = evaluate_recognizers(ra, aspec, rp, pspec, videos, actions, privacy,
                                  attribute_names=["x", "y"], seed=5)
    report.validate()
    assert report.seed == 5
    assert report.attribute_names == ["x", "y"]
    assert len(report.per_class_ap) == 2


def test_phase_eval_outputs():
    videos, actions, privacy = tiny_data(n=8)
    params = init_model_params(RngState(0).child("m"), SETTINGS)
    out = run_phase_eval(params, SETTINGS, videos, actions, privacy,
                         videos, actions, privacy,
                         recognizer_spec("action", 2), recognizer_spec("video-privacy", 2),
                         PLAN, RngState(0).child("p3"),
                         frame_spec=recognizer_spec("frame-privacy", 2))
    assert out["retained_counts"] == [4, 2]
    assert out["transformed_train"].shape == videos.shape
    assert out["transformed_test"].shape == videos.shape
    out["report"].validate()
    assert set(out["frame_privacy"]) == {"cmap", "f1"}


def test_load_phase_state_round_trip(tmp_path):
    videos, actions, _ = tiny_data()
    params = init_model_params(RngState(0).child("m"), SETTINGS)
    run_phase_init(params, SETTINGS, videos, actions, 2, PLAN,
                   RngState(0).child("p1"), checkpoint_dir=tmp_path,
                   config_snapshot={"alpha": 0.5})
    loaded, meta = load_phase_state(tmp_path / "init_epoch001.ckpt")
    assert meta["config"] == {"alpha": 0.5}
    assert set(loaded) == set(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data)
        assert loaded[k].data.dtype == params[k].data.dtype
        # resumed phases must keep training these, not treat them as constants
        assert loaded[k].requires_grad


def test_load_phase_state_rejects_optimizer_only_file(tmp_path):
    path = tmp_path / "opt.ckpt"
    save_checkpoint(path, {"opt.m.x": np.zeros(2, dtype=np.float32)})
    with pytest.raises(TrainingError, match="no model parameters"):
        load_phase_state(path)
