"""Tubelet layout and pixel/token mapping tests."""

import numpy as np
import pytest

from tubeveil.engine import Tensor, backward, reduce_sum
from tubeveil.tokenizer import (
    LayoutError,
    TubeletLayout,
    VideoClip,
    clamp_pixels,
    compose_video,
    decision_pixel_mask,
    embed_tokens,
    patches_to_video,
    video_to_patches,
)

RNG = np.random.default_rng(5)
LAYOUT = TubeletLayout(2, 8, 8)


def test_grid_and_counts_desk_scale():
    assert LAYOUT.grid(8, 32, 32) == (4, 4, 4)
    assert LAYOUT.token_counts(8, 32, 32) == (4, 16)
    assert LAYOUT.patch_len == 3 * 2 * 8 * 8


def test_grid_paper_scale():
    layout = TubeletLayout(2, 16, 16)
    l, gh, gw = layout.grid(16, 112, 112)
    assert (l, gh * gw) == (8, 49)
    assert l * gh * gw == 392


def test_indivisible_video_rejected():
    with pytest.raises(LayoutError):
        LAYOUT.check(7, 32, 32)
    with pytest.raises(LayoutError):
        LAYOUT.grid(8, 30, 32)


def test_patch_roundtrip_is_exact():
    video = RNG.random((2, 8, 32, 32, 3)).astype(np.float32)
    patches = video_to_patches(Tensor(video), LAYOUT)
    assert patches.shape == (2, 64, LAYOUT.patch_len)
    back = patches_to_video(patches, LAYOUT, 8, 32, 32)
    np.testing.assert_array_equal(back.data, video)


def test_patch_rows_are_contiguous_tubelets():
    # paint one tubelet, exactly one row should be nonzero
    video = np.zeros((1, 8, 32, 32, 3), dtype=np.float32)
    video[0, 2:4, 8:16, 24:32, :] = 1.0  # slice 1, cell row 1, cell col 3
    patches = video_to_patches(Tensor(video), LAYOUT).data
    nonzero_rows = np.flatnonzero(np.abs(patches[0]).sum(axis=1))
    assert nonzero_rows.tolist() == [1 * 16 + 1 * 4 + 3]
    assert np.all(patches[0, nonzero_rows[0]] == 1.0)


def test_token_of_pixel_matches_patch_row():
    assert LAYOUT.token_of_pixel(3, 9, 25, (8, 32, 32)) == (1, 1 * 4 + 3)
    assert LAYOUT.token_of_pixel(0, 0, 0, (8, 32, 32)) == (0, 0)


def test_embed_tokens_shapes_and_mismatch():
    patches = Tensor(RNG.random((1, 64, LAYOUT.patch_len)).astype(np.float32))
    w = Tensor(RNG.random((LAYOUT.patch_len, 12)).astype(np.float32))
    b = Tensor(np.zeros(12, dtype=np.float32))
    tokens = embed_tokens(patches, w, b, 4, 16)
    assert tokens.shape == (1, 4, 16, 12)
    with pytest.raises(LayoutError):
        embed_tokens(patches, Tensor(np.zeros((7, 12), dtype=np.float32)), b, 4, 16)


def test_decision_pixel_mask_paints_whole_tubelets():
    decision = np.zeros((1, 4, 16), dtype=np.float32)
    decision[0, 1, 7] = 1.0  # cell row 1, cell col 3 of slice 1
    mask = decision_pixel_mask(Tensor(decision), LAYOUT, 8, 32, 32).data
    assert mask.shape == (1, 8, 32, 32, 1)
    assert mask.sum() == 2 * 8 * 8
    assert np.all(mask[0, 2:4, 8:16, 24:32, 0] == 1.0)


def test_compose_video_zeroes_abandoned_tubelets():
    video = np.ones((1, 8, 32, 32, 3), dtype=np.float32)
    decision = np.ones((1, 4, 16), dtype=np.float32)
    decision[0, 0, 0] = 0.0
    out = compose_video(Tensor(video), Tensor(decision), LAYOUT).data
    assert np.all(out[0, 0:2, 0:8, 0:8, :] == 0.0)
    assert np.all(out[0, 2:, :, :, :] == 1.0)


def test_compose_video_gradient_reaches_decision():
    video = Tensor(np.ones((1, 4, 8, 8, 3), dtype=np.float32))
    layout = TubeletLayout(2, 4, 4)
    decision = Tensor(np.ones((1, 2, 4), dtype=np.float32), requires_grad=True)
    backward(reduce_sum(compose_video(video, decision, layout)))
    # each decision entry covers dt*dh*dw pixels x 3 channels of ones
    np.testing.assert_allclose(decision.grad, np.full((1, 2, 4), 2 * 4 * 4 * 3.0))


def test_clamp_pixels_range():
    x = Tensor(np.array([-0.5, 0.3, 1.7], dtype=np.float32))
    np.testing.assert_array_equal(clamp_pixels(x).data,
                                  np.array([0.0, 0.3, 1.0], dtype=np.float32))


def test_video_clip_validation():
    good = VideoClip(RNG.random((8, 32, 32, 3)).astype(np.float32), 1,
                     np.array([0, 1, 1]))
    good.validate(LAYOUT)
    with pytest.raises(ValueError):
        VideoClip(np.full((8, 32, 32, 3), 1.5, dtype=np.float32), 0,
                  np.array([0, 1, 0])).validate()
    with pytest.raises(ValueError):
        VideoClip(RNG.random((8, 32, 32, 3)).astype(np.float32), 0,
                  np.array([0.5, 1, 0])).validate()
    with pytest.raises(LayoutError):
        VideoClip(RNG.random((8, 32, 31, 3)).astype(np.float32), 0,
                  np.array([1, 0, 0])).validate(LAYOUT)
