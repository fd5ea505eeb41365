import itertools
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from sparta.errors import ContractError
from sparta.losses import (BlendSchedule, LossBreakdown, alpha_at_epoch, cycle_penalty, recon_mse, stage2_total,
                           temporal_contrastive)


def brute_force_ntxent(z, pairs, tau):
    """Direct evaluation: (1/2N) sum over pairs of l(a,p) + l(p,a), denominators over all other views."""
    z = np.asarray(z, dtype=np.float64)
    m = len(z)

    def sim(i, j):
        return float(sum(z[i][c] * z[j][c] for c in range(z.shape[1]))) / tau

    def ell(i, j):
        denom = sum(math.exp(sim(i, k)) for k in range(m) if k != i)
        return -math.log(math.exp(sim(i, j)) / denom)

    n = len({a for a, _ in pairs})
    return sum(ell(a, p) + ell(p, a) for a, p in pairs) / (2 * n)


def random_batch(rng, max_views=8):
    """Random (z, anchors, positives) with 1-2 positives per anchor and spare negative views."""
    while True:
        n = int(rng.integers(1, 4))
        k = int(rng.integers(1, 3))
        extra = int(rng.integers(0, 3))
        m = n * (1 + k) + extra
        if m <= max_views:
            break
    z = F.normalize(torch.from_numpy(rng.normal(size=(m, int(rng.integers(2, 6))))), dim=1)
    anchors = torch.arange(n)
    positives = torch.stack([torch.arange(n) + n * (j + 1) for j in range(k)], dim=1)
    return z, anchors, positives


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        z, a, p = random_batch(rng)
        tau = float(rng.uniform(0.05, 1.0))
        pairs = [(int(a[i]), int(p[i, j])) for i in range(len(a)) for j in range(p.shape[1])]
        worst = max(worst, abs(float(temporal_contrastive(z, a, p, tau)) - brute_force_ntxent(z.numpy(), pairs, tau)))
    assert worst < 1e-6
    assert time.perf_counter() - start < 10


def test_single_pair_is_zero():
    z = F.normalize(torch.randn(2, 4, dtype=torch.float64), dim=1)
    for tau in (0.1, 0.3, 2.0):
        assert float(temporal_contrastive(z, [0], [[1]], tau)) == pytest.approx(0.0, abs=1e-12)


def test_hand_example_four_views():
    angles = torch.tensor([0.0, math.pi / 6, math.pi / 2, 2 * math.pi / 3], dtype=torch.float64)
    z = torch.stack([angles.cos(), angles.sin()], dim=1)
    value = float(temporal_contrastive(z, [0, 2], [[1], [3]], 0.3))
    assert value == pytest.approx(0.18250037131185803, abs=1e-12)


def test_ranking_invariant_to_tau():
    rng = np.random.default_rng(1)
    z = F.normalize(torch.from_numpy(rng.normal(size=(6, 3))), dim=1)
    candidates = [c for c in itertools.permutations(range(1, 6), 1)]
    best = []
    for tau in (0.05, 0.3, 1.5):
        losses = [float(temporal_contrastive(z, [0], [[c[0]]], tau)) for c in candidates]
        best.append(int(np.argmin(losses)))
    assert len(set(best)) == 1


def test_unnormalized_projection_rejected():
    z = torch.randn(4, 3, dtype=torch.float64) * 3
    with pytest.raises(ContractError):
        temporal_contrastive(z, [0, 1], [[2], [3]], 0.3)


def test_non_negative():
    rng = np.random.default_rng(2)
    for _ in range(50):
        z, a, p = random_batch(rng)
        assert float(temporal_contrastive(z, a, p, 0.3)) >= 0


# -- cycle ---------------------------------------------------------------------


def test_cycle_zero_for_constant():
    h = torch.randn(3, 7)
    assert float(cycle_penalty(h, h, h)) == 0.0


def test_cycle_zero_for_linear_motion():
    h, v = torch.randn(3, 7, dtype=torch.float64), torch.randn(3, 7, dtype=torch.float64)
    assert float(cycle_penalty(h - v, h, h + v)) < 1e-12


def test_cycle_worked_example():
    hm = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    h0 = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    hp = torch.tensor([[4.0, 0.0]], dtype=torch.float64)
    assert float(cycle_penalty(hm, h0, hp)) == 2.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_cycle_annihilates_affine_in_time(seed, delta):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    t = rng.uniform(-10, 10, size=(4, 1))
    h = lambda s: torch.from_numpy(a + b * s)  # noqa: E731
    assert float(cycle_penalty(h(t - delta), h(t), h(t + delta))) < 1e-12


# -- reconstruction ---------------------------------------------------------------


def test_recon_zero():
    x = torch.randn(2, 5, 4, 2)
    assert float(recon_mse(x, x)) == 0.0


def test_recon_constant_offset():
    x = torch.randn(3, 5, 4, 2, dtype=torch.float64)
    assert float(recon_mse(x + 1, x)) == pytest.approx(5.0, abs=1e-12)


def test_recon_single_pixel():
    x = torch.zeros(2, 1, 4, 3, dtype=torch.float64)
    x_hat = x.clone()
    x_hat[1, 0, 2, 1] = 0.7
    assert float(recon_mse(x_hat, x)) == pytest.approx(0.49 / (2 * 4 * 3), abs=1e-15)


def test_recon_shape_mismatch():
    with pytest.raises(ContractError):
        recon_mse(torch.zeros(1, 5, 4, 2), torch.zeros(1, 4, 4, 2))


# -- blend schedule ---------------------------------------------------------------


def test_alpha_values():
    s = BlendSchedule(1.0, 0.01)
    assert alpha_at_epoch(s, 0) == 1.0
    assert abs(alpha_at_epoch(s, 100) - math.exp(-1)) < 1e-9
    assert abs(alpha_at_epoch(s, 250) - math.exp(-2.5)) < 1e-9
    assert alpha_at_epoch(s, 100) == pytest.approx(0.367879, abs=1e-6)
    assert alpha_at_epoch(s, 250) == pytest.approx(0.082085, abs=1e-6)


def test_alpha_strictly_decreasing():
    s = BlendSchedule(0.8, 0.02)
    vals = [alpha_at_epoch(s, e) for e in range(300)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        BlendSchedule(0.0, 0.01)
    with pytest.raises(ValueError):
        BlendSchedule(1.0, -1)


def test_stage2_boundaries():
    lc, cyc, rv, ra = (torch.tensor(v, dtype=torch.float64) for v in (1.3, 0.2, 0.7, 2.9))
    assert float(stage2_total(lc, cyc, rv, ra, 1.0)[0]) == float(lc + cyc + rv)
    assert float(stage2_total(lc, cyc, rv, ra, 0.0)[0]) == float(ra)


def test_stage2_arithmetic():
    total, parts = stage2_total(1.0, 0.5, 0.25, 2.0, 0.5)
    assert float(total) == pytest.approx(1.875, abs=1e-12)
    assert isinstance(parts, LossBreakdown)
    assert abs(parts.recompute_total() - parts.total) < 1e-9


def test_stage2_alpha_range():
    with pytest.raises(ValueError):
        stage2_total(1.0, 0.0, 0.0, 1.0, 1.5)
