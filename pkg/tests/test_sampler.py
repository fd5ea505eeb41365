import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparta.errors import SamplerError
from sparta.sampler import (DELTA_PROBS, PairPlan, anchor_pool, build_batch_plan, check_plan, draw_delta,
                            draw_deltas, draw_hard_negative, draw_hard_negatives, draw_soft_negative,
                            draw_soft_negatives, epoch_plans, plan_for_anchors)


def test_delta_probabilities():
    assert DELTA_PROBS[0] == pytest.approx(16 / 31, abs=1e-12)
    assert DELTA_PROBS[4] == pytest.approx(1 / 31, abs=1e-12)
    assert DELTA_PROBS.sum() == pytest.approx(1.0)
    assert np.all(np.diff(DELTA_PROBS) < 0)


def test_delta_frequencies_monte_carlo():
    d = draw_deltas(np.random.default_rng(0), 10**6)
    freq = np.bincount(d, minlength=6)[1:] / len(d)
    assert np.max(np.abs(freq - np.array([16, 8, 4, 2, 1]) / 31)) < 0.005


def test_draw_delta_range():
    rng = np.random.default_rng(1)
    assert {draw_delta(rng) for _ in range(500)} <= {1, 2, 3, 4, 5}


def test_hard_negative_interior_anchor():
    rng = np.random.default_rng(2)
    draws = np.array([draw_hard_negative(100, 10000, rng, PairPlan(100, 3)) for _ in range(3000)])
    ok = ((draws >= 70) & (draws <= 94)) | ((draws >= 106) & (draws <= 130))
    assert ok.all()
    # both sides are reachable and every candidate shows up
    assert set(draws) == set(range(70, 95)) | set(range(106, 131))


def test_hard_negative_near_left_edge():
    draws = draw_hard_negatives(np.full(5000, 2), 10000, np.random.default_rng(3))
    assert draws.min() >= 8 and draws.max() <= 32
    assert set(draws) == set(range(8, 33))


def test_hard_negative_short_series():
    with pytest.raises(SamplerError):
        anchor_pool(10)
    for anchor in (4, 5):
        with pytest.raises(SamplerError):
            draw_hard_negative(anchor, 10, np.random.default_rng(0))


def test_hard_negative_rejects_foreign_pair():
    with pytest.raises(SamplerError):
        draw_hard_negative(10, 100, np.random.default_rng(0), PairPlan(11, 1))


def test_soft_negative_single_candidate():
    rng = np.random.default_rng(4)
    assert {draw_soft_negative(0, 1002, rng) for _ in range(50)} == {1001}


def test_soft_negative_range():
    draws = draw_soft_negatives(np.full(5000, 500), 3000, np.random.default_rng(5))
    assert draws.min() >= 1501 and draws.max() <= 2999


def test_soft_negative_boundary_monte_carlo():
    draws = draw_soft_negatives(np.full(10**5, 1500), 4000, np.random.default_rng(6))
    assert np.abs(draws - 1500).min() == 1001


def test_soft_negative_empty():
    with pytest.raises(SamplerError):
        draw_soft_negative(500, 1000, np.random.default_rng(0))


def test_small_batches_satisfy_invariants():
    rng = np.random.default_rng(7)
    pool = anchor_pool(5000)
    for _ in range(1000):
        plan = build_batch_plan(pool, 4, rng, 5000)
        check_plan(plan, 5000)
        assert plan.batch_size == 4
        assert len(plan.view_indices()) == 20
        assert len(np.unique(plan.aug_seeds)) == 20


def test_edge_anchors_excluded():
    pool = anchor_pool(5000)
    assert pool.min() >= 5 and pool.max() < 5000 - 5
    rng = np.random.default_rng(8)
    for plan in epoch_plans(pool, 128, rng, 5000):
        assert plan.minus.min() >= 0 and plan.plus.max() < 5000


def test_edge_anchor_request_rejected():
    with pytest.raises(SamplerError):
        plan_for_anchors([2, 100], 5000, np.random.default_rng(0))


def test_mask_ratio_distribution():
    rng = np.random.default_rng(9)
    plans = [build_batch_plan(anchor_pool(5000), 128, rng, 5000) for _ in range(400)]
    ratios = np.concatenate([np.r_[p.ratio_minus, p.ratio_plus] for p in plans])
    assert len(ratios) >= 10**5
    assert ratios.min() >= 0.5 and ratios.max() < 0.9
    assert abs(ratios.mean() - 0.7) < 0.005


def test_insufficient_pool():
    with pytest.raises(SamplerError):
        build_batch_plan(np.arange(10, 13), 4, np.random.default_rng(0), 5000)


def test_plans_are_deterministic():
    pool = anchor_pool(3000)
    a = build_batch_plan(pool, 16, np.random.default_rng(11), 3000)
    b = build_batch_plan(pool, 16, np.random.default_rng(11), 3000)
    assert a.to_dict() == b.to_dict()


def test_without_negatives():
    plan = build_batch_plan(anchor_pool(200, hard_negatives=False), 8, np.random.default_rng(0), 200, False)
    assert not plan.has_negatives and len(plan.view_indices()) == 24
    check_plan(plan, 200)


def test_check_plan_catches_bad_rows():
    plan = build_batch_plan(anchor_pool(3000), 4, np.random.default_rng(0), 3000)
    bad = plan.__class__(**{**plan.__dict__, "soft": plan.anchor + 10})
    with pytest.raises(SamplerError):
        check_plan(bad, 3000)


@settings(max_examples=30, deadline=None)
@given(st.integers(2100, 20000), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_rows_always_valid(length, batch, seed):
    plan = build_batch_plan(anchor_pool(length), batch, np.random.default_rng(seed), length)
    check_plan(plan, length)
    for row in plan.rows:
        assert abs(row.hard_neg - row.pair.anchor) > row.pair.delta
        assert row.hard_neg not in (row.pair.anchor, row.pair.pos_minus, row.pair.pos_plus)
