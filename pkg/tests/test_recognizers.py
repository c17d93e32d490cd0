"""Recognizer specs, logits shapes, and score conventions."""

import numpy as np
import pytest

from tubeveil.engine import RngState, Tensor
from tubeveil.recognizers import RecognizerSpec, build_recognizer, recognize, video_scores
from tubeveil.tokenizer import TubeletLayout

LAYOUT = TubeletLayout(dt=2, dh=4, dw=4)
FRAME_LAYOUT = TubeletLayout(dt=1, dh=4, dw=4)
SHAPE = (4, 8, 8)


def spec_for(kind, n_out):
    layout = FRAME_LAYOUT if kind == "frame-privacy" else LAYOUT
    return RecognizerSpec(kind=kind, n_out=n_out, layout=layout, video_shape=SHAPE,
                          d=12, layers=1, heads=2)


def make_batch(seed=0, b=3):
    return RngState(seed).child("v").uniform((b, 4, 8, 8, 3)).astype(np.float32)


def test_spec_validation():
    for kind, n in (("action", 4), ("video-privacy", 3), ("frame-privacy", 3)):
        spec_for(kind, n).validate()
    with pytest.raises(ValueError, match="unknown recognizer kind"):
        spec_for("audio", 2).validate()
    with pytest.raises(ValueError, match="at least one output"):
        spec_for("action", 0).validate()
    with pytest.raises(ValueError, match="dt must be 1"):
        RecognizerSpec(kind="frame-privacy", n_out=3, layout=LAYOUT,
                       video_shape=SHAPE, d=12, layers=1, heads=2).validate()


def test_logit_shapes_by_kind():
    batch = make_batch()
    for kind, n, want in (("action", 4, (3, 4)),
                          ("video-privacy", 3, (3, 3)),
                          ("frame-privacy", 3, (3, 4, 3))):
        spec = spec_for(kind, n)
        params = build_recognizer(spec, RngState(1).child(kind))
        assert recognize(params, spec, Tensor(batch)).shape == want


def test_single_video_promoted_to_batch():
    spec = spec_for("action", 4)
    params = build_recognizer(spec, RngState(2).child("b"))
    one = recognize(params, spec, Tensor(make_batch(b=1)[0]))
    assert one.shape == (1, 4)


def test_action_scores_are_softmax_rows():
    spec = spec_for("action", 4)
    params = build_recognizer(spec, RngState(3).child("b"))
    scores = video_scores(params, spec, Tensor(make_batch()))
    assert scores.shape == (3, 4)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, rtol=1e-12)
    assert (scores > 0).all()


def test_privacy_scores_are_sigmoids():
    spec = spec_for("video-privacy", 3)
    params = build_recognizer(spec, RngState(4).child("b"))
    logits = recognize(params, spec, Tensor(make_batch())).data.astype(np.float64)
    scores = video_scores(params, spec, Tensor(make_batch()))
    np.testing.assert_allclose(scores, 1 / (1 + np.exp(-logits)), rtol=1e-12)


def test_frame_scores_average_per_frame_sigmoids():
    spec = spec_for("frame-privacy", 3)
    params = build_recognizer(spec, RngState(5).child("b"))
    logits = recognize(params, spec, Tensor(make_batch())).data.astype(np.float64)
    scores = video_scores(params, spec, Tensor(make_batch()))
    assert scores.shape == (3, 3)
    np.testing.assert_allclose(scores, (1 / (1 + np.exp(-logits))).mean(axis=1), rtol=1e-12)


def test_frame_recognizer_ignores_frame_order_only_in_scores():
    """Frame scores are an average, so shuffling frames leaves them alone."""
    spec = spec_for("frame-privacy", 3)
    params = build_recognizer(spec, RngState(6).child("b"))
    batch = make_batch(b=1)
    shuffled = batch[:, ::-1].copy()
    np.testing.assert_allclose(video_scores(params, spec, Tensor(batch)),
                               video_scores(params, spec, Tensor(shuffled)), atol=1e-7)


def test_build_is_deterministic_per_seed():
    spec = spec_for("action", 4)
    a = build_recognizer(spec, RngState(9).child("x"))
    b = build_recognizer(spec, RngState(9).child("x"))
    assert set(a) == set(b)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
