"""Progressive token sparsification tests.

The two frozen loss values (0.04, 0.260583) come from hand arithmetic
on the per-slice keep-fraction targets; selection chains come from the
round-half-up recurrence.
"""

import numpy as np
import pytest

from tubeveil.engine import RngState, Tensor, backward, reduce_sum
from tubeveil.engine.tensor import ShapeError
from tubeveil.params import ParamDict, init_linear
from tubeveil.sparsifier import (
    KEEP_CHANNEL,
    SparsifierSettings,
    gumbel_decide,
    init_sparsifier_params,
    multi_level_aggregate,
    predict_keep_probs,
    round_half_up,
    run_sparsifier_stack,
    sparsification_loss,
    topk_select_inference,
    update_decision,
)


def _head_params(d: int, rng: RngState, zero: bool = False) -> ParamDict:
    params: ParamDict = {}
    init_linear(params, "s.head.fc1", d, d // 2, rng.child("fc1"))
    init_linear(params, "s.head.fc2", d // 2, max(d // 4, 1), rng.child("fc2"))
    init_linear(params, "s.head.fc3", max(d // 4, 1), 2, rng.child("fc3"))
    if zero:
        for p in params.values():
            p.data[...] = 0.0
    return params


def test_settings_validation():
    SparsifierSettings(alpha=1.0)
    with pytest.raises(ValueError):
        SparsifierSettings(alpha=0.0)
    with pytest.raises(ValueError):
        SparsifierSettings(alpha=1.2)
    with pytest.raises(ValueError):
        SparsifierSettings(blocks=0)


def test_aggregate_identical_tokens_constant_branches():
    rng = RngState(0)
    st = SparsifierSettings(blocks=1, layers_per_block=1, heads=2)
    params = init_sparsifier_params(rng, 6, st, prefix="s")
    # tie the two averaged branches so their equality isolates the
    # averaging itself (each branch has its own projection otherwise)
    for suffix in ("w", "b"):
        params[f"s.0.agg.st.{suffix}"].data[...] = params[f"s.0.agg.spatial.{suffix}"].data
    token = rng.child("tok").normal((6,))
    x = Tensor(np.broadcast_to(token, (1, 2, 3, 6)).copy())
    dec = Tensor(np.ones((1, 2, 3), dtype=np.float32))
    ev = multi_level_aggregate(x, dec, params, "s.0").data
    assert ev.shape == (1, 2, 3, 6)
    # identical inputs: every token row identical
    assert np.allclose(ev, ev[0, 0, 0], atol=1e-6)
    # averaging identical vectors is the identity, so the per-slice mean
    # branch (middle third) matches the whole-video mean branch (last third)
    np.testing.assert_allclose(ev[..., 2:4], ev[..., 4:6], atol=1e-6)


def test_aggregate_masks_out_huge_abandoned_token():
    rng = RngState(1)
    st = SparsifierSettings(blocks=1, layers_per_block=1, heads=2)
    params = init_sparsifier_params(rng, 6, st, prefix="s")
    x = rng.child("x").normal((1, 2, 4, 6))
    dec = np.ones((1, 2, 4), dtype=np.float32)
    dec[0, 0, 2] = 0.0
    base = multi_level_aggregate(Tensor(x.copy()), Tensor(dec), params, "s.0").data
    x[0, 0, 2] = 1e6
    spiked = multi_level_aggregate(Tensor(x), Tensor(dec), params, "s.0").data
    keep = dec.astype(bool)
    np.testing.assert_allclose(spiked[0][keep[0]], base[0][keep[0]], rtol=1e-4)


def test_aggregate_rejects_width_not_divisible_by_three():
    rng = RngState(2)
    with pytest.raises(ShapeError):
        init_sparsifier_params(rng, 8, SparsifierSettings(blocks=1), prefix="s")


def test_keep_probs_rows_sum_one_and_shape():
    rng = RngState(3)
    params = _head_params(8, rng)
    z = predict_keep_probs(Tensor(rng.child("x").normal((2, 3, 5, 8))), params, "s").data
    assert z.shape == (2, 3, 5, 2)
    np.testing.assert_allclose(z.sum(axis=-1), np.ones((2, 3, 5)), atol=1e-6)


def test_keep_probs_zero_head_gives_uniform():
    params = _head_params(8, RngState(4), zero=True)
    z = predict_keep_probs(Tensor(RngState(5).normal((1, 2, 2, 8))), params, "s").data
    np.testing.assert_allclose(z, 0.5, atol=1e-7)


def test_eval_decide_is_argmax():
    z = np.array([[[[0.9, 0.1], [0.2, 0.8]]]], dtype=np.float32)
    dec = gumbel_decide(Tensor(z), tau=1.0, train=False).data
    np.testing.assert_array_equal(dec, [[[1.0, 0.0]]])
    assert KEEP_CHANNEL == 0


def test_train_decide_uniform_keep_frequency():
    z = Tensor(np.full((10000, 1, 1, 2), 0.5, dtype=np.float32))
    dec = gumbel_decide(z, tau=1.0, rng=RngState(42).child("mc"), train=True).data
    assert set(np.unique(dec)) <= {0.0, 1.0}
    assert abs(dec.mean() - 0.5) < 0.02


def test_train_decide_gradient_follows_soft_path():
    rng = RngState(6)
    z = rng.normal((1, 2, 3, 2), std=0.3) * 0 + rng.child("z").uniform((1, 2, 3, 2), 0.2, 0.8)
    noise = rng.child("g").gumbel((1, 2, 3, 2), dtype=np.float64).astype(np.float32)
    zt = Tensor(z, requires_grad=True)
    hard = gumbel_decide(zt, tau=1.0, train=True, noise=noise)
    backward(reduce_sum(hard * hard))
    assert zt.grad is not None and np.abs(zt.grad).max() > 0


def test_decide_deterministic_under_frozen_noise():
    z = RngState(7).uniform((1, 2, 2, 2), 0.1, 0.9)
    noise = RngState(8).gumbel((1, 2, 2, 2))
    a = gumbel_decide(Tensor(z), 1.0, train=True, noise=noise).data
    b = gumbel_decide(Tensor(z.copy()), 1.0, train=True, noise=noise.copy()).data
    np.testing.assert_array_equal(a, b)


def test_update_decision_hadamard():
    cur = Tensor(np.array([[1.0, 1.0, 0.0]], dtype=np.float32))
    new = Tensor(np.array([[1.0, 0.0, 1.0]], dtype=np.float32))
    np.testing.assert_array_equal(update_decision(cur, new).data, [[1.0, 0.0, 0.0]])
    with pytest.raises(ShapeError):
        update_decision(cur, Tensor(np.ones((1, 4), dtype=np.float32)))


def test_update_decision_monotone_over_streams():
    rng = RngState(9)
    cur = np.ones((4, 6), dtype=np.float32)
    for step in range(3):
        new = (rng.child(f"s{step}").uniform((4, 6)) < 0.8).astype(np.float32)
        nxt = update_decision(Tensor(cur), Tensor(new)).data
        assert np.all(nxt <= cur)
        cur = nxt


def test_loss_zero_for_all_ones_alpha_one():
    dec = [Tensor(np.ones((1, 2, 4), dtype=np.float32)) for _ in range(3)]
    assert sparsification_loss(dec, 1.0).item() == 0.0


def test_loss_hand_case_single_block():
    dec = [Tensor(np.array([[[1.0, 0.0]]], dtype=np.float32))]
    assert abs(sparsification_loss(dec, 0.7).item() - 0.04) < 1e-6


def test_loss_hand_case_three_blocks():
    dec = [Tensor(np.ones((1, 1, 4), dtype=np.float32)) for _ in range(3)]
    # all-ones fractions vs targets 0.7, 0.49, 0.343
    want = (0.3 ** 2 + 0.51 ** 2 + 0.657 ** 2) / 3
    assert abs(sparsification_loss(dec, 0.7).item() - want) < 1e-6
    assert abs(want - 0.260583) < 1e-6


def test_loss_rejects_empty():
    with pytest.raises(ValueError):
        sparsification_loss([], 0.7)


def test_round_half_up_cases():
    assert round_half_up(31.5) == 32
    assert round_half_up(0.5) == 1
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4) == 2
    assert round_half_up(0.7 * 45) == 32  # binary product lands just under 31.5


def _chain(ln: int, alpha: float, blocks: int) -> list[int]:
    counts = [ln]
    for _ in range(blocks):
        counts.append(max(1, min(counts[-1], round_half_up(alpha * counts[-1]))))
    return counts


def test_topk_chain_paper_scale():
    assert _chain(392, 0.7, 3) == [392, 274, 192, 134]


def test_topk_chain_desk_scale():
    assert _chain(64, 0.7, 3) == [64, 45, 32, 22]


def test_topk_chain_ten_tokens_half():
    assert _chain(10, 0.5, 3) == [10, 5, 3, 2]


def test_topk_select_counts_and_ties():
    l, n = 2, 5
    z = np.zeros((l, n, 2), dtype=np.float32)
    z[..., 0] = 0.5  # all keep-probabilities tie
    cur = np.ones((l, n), dtype=np.float32)
    out = topk_select_inference(z, cur, 0.5)
    assert out.sum() == round_half_up(0.5 * 10)
    # ties keep the lower flattened indices
    np.testing.assert_array_equal(out.reshape(-1)[:5], np.ones(5))


def test_topk_alpha_one_unchanged():
    rng = RngState(10)
    z = rng.uniform((2, 4, 2))
    cur = (rng.child("c").uniform((2, 4)) < 0.6).astype(np.float32)
    cur[0, 0] = 1.0
    np.testing.assert_array_equal(topk_select_inference(z, cur, 1.0), cur)


def test_topk_zero_retained_rejected():
    z = np.ones((1, 2, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        topk_select_inference(z, np.zeros((1, 2), dtype=np.float32), 0.7)


def test_topk_respects_current_decision():
    z = np.zeros((1, 4, 2), dtype=np.float32)
    z[0, :, 0] = [0.9, 0.8, 0.7, 0.6]
    cur = np.array([[0.0, 1.0, 1.0, 1.0]], dtype=np.float32)
    out = topk_select_inference(z, cur, 0.5)
    # quota = round(0.5 * 3) = 2, chosen among retained only
    np.testing.assert_array_equal(out, [[0.0, 1.0, 1.0, 0.0]])


def _stack_fixture(seed=11, d=6, blocks=3):
    rng = RngState(seed)
    st = SparsifierSettings(alpha=0.7, blocks=blocks, layers_per_block=1, heads=2)
    params = init_sparsifier_params(rng.child("init"), d, st, prefix="s")
    tokens = Tensor(rng.child("tok").normal((2, 2, 4, d)))
    return st, params, tokens, rng


def test_stack_eval_alpha_one_keeps_everything():
    rng = RngState(12)
    st = SparsifierSettings(alpha=1.0, blocks=2, layers_per_block=1, heads=2)
    params = init_sparsifier_params(rng.child("init"), 6, st, prefix="s")
    tokens = Tensor(rng.child("tok").normal((1, 2, 4, 6)))
    out, decisions, _ = run_sparsifier_stack(tokens, params, "s", st, train=False)
    assert out.shape == tokens.shape
    for d in decisions:
        np.testing.assert_array_equal(d.data, np.ones_like(d.data))


def test_stack_eval_counts_follow_chain():
    st, params, tokens, _ = _stack_fixture()
    _, decisions, _ = run_sparsifier_stack(tokens, params, "s", st, train=False)
    counts = [int(d.data[0].sum()) for d in decisions]
    assert counts == _chain(8, 0.7, 3)[1:]  # 8 -> 6 -> 4 -> 3
    counts_b = [int(d.data[1].sum()) for d in decisions]
    assert counts_b == counts


def test_stack_train_decisions_binary_and_monotone():
    st, params, tokens, rng = _stack_fixture()
    _, decisions, _ = run_sparsifier_stack(tokens, params, "s", st,
                                        rng=rng.child("noise"), train=True)
    prev = np.ones_like(decisions[0].data)
    for d in decisions:
        assert set(np.unique(d.data)) <= {0.0, 1.0}
        assert np.all(d.data <= prev)
        prev = d.data


def test_stack_forced_decisions_are_respected():
    st, params, tokens, rng = _stack_fixture(blocks=2)
    forced = [(rng.child(f"f{m}").uniform((2, 2, 4)) < 0.7).astype(np.float32)
              for m in range(2)]
    forced[0][:, 0, 0] = 1.0
    forced[1][:, 0, 0] = 1.0
    _, decisions, _ = run_sparsifier_stack(tokens, params, "s", st,
                                        forced_decisions=forced, train=True)
    np.testing.assert_array_equal(decisions[0].data, forced[0])
    np.testing.assert_array_equal(decisions[1].data, forced[0] * forced[1])


def test_stack_abandoned_token_content_invariance():
    # content of a token abandoned before the first layer must not leak
    # into retained-token outputs
    st, params, tokens, rng = _stack_fixture(blocks=1)
    forced = [np.ones((2, 2, 4), dtype=np.float32)]
    forced[0][:, 0, 1] = 0.0
    init = Tensor(forced[0].copy())
    out_a, _, _ = run_sparsifier_stack(tokens, params, "s", st, forced_decisions=forced,
                                    train=True, initial_decision=init)
    bumped = tokens.data.copy()
    bumped[:, 0, 1, :] += 50.0
    out_b, _, _ = run_sparsifier_stack(Tensor(bumped), params, "s", st,
                                    forced_decisions=[forced[0].copy()], train=True,
                                    initial_decision=Tensor(forced[0].copy()))
    keep = forced[0].astype(bool)
    np.testing.assert_allclose(out_a.data[keep], out_b.data[keep], atol=1e-5)


def test_stack_one_shot_selects_final_quota():
    rng = RngState(13)
    st = SparsifierSettings(alpha=0.7, blocks=3, layers_per_block=1, heads=2,
                            topk_one_shot=True)
    params = init_sparsifier_params(rng.child("init"), 6, st, prefix="s")
    tokens = Tensor(rng.child("tok").normal((1, 2, 4, 6)))
    _, decisions, _ = run_sparsifier_stack(tokens, params, "s", st, train=False)
    assert int(decisions[-1].data[0].sum()) == round_half_up(8 * 0.7 ** 3)


def test_stack_per_frame_quota():
    rng = RngState(14)
    st = SparsifierSettings(alpha=0.5, blocks=1, layers_per_block=1, heads=2,
                            topk_per_frame=True)
    params = init_sparsifier_params(rng.child("init"), 6, st, prefix="s")
    tokens = Tensor(rng.child("tok").normal((1, 3, 4, 6)))
    _, decisions, _ = run_sparsifier_stack(tokens, params, "s", st, train=False)
    per_slice = decisions[-1].data[0].sum(axis=-1)
    np.testing.assert_array_equal(per_slice, np.full(3, 2.0))
