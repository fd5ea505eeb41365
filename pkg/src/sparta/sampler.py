"""Index-level batch plans: symmetric temporal positives plus hard and soft negatives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SamplerError

DELTA_MAX = 5
DELTA_WEIGHTS = np.array([2.0 ** -(d - 1) for d in range(1, DELTA_MAX + 1)])
DELTA_PROBS = DELTA_WEIGHTS / DELTA_WEIGHTS.sum()
HARD_MIN = DELTA_MAX + 1
HARD_MAX = 30
SOFT_MIN = 1001
MASK_LOW, MASK_HIGH = 0.5, 0.9
SEED_HIGH = 2**31 - 1


@dataclass(frozen=True)
class PairPlan:
    anchor: int
    delta: int

    @property
    def pos_minus(self):
        return self.anchor - self.delta

    @property
    def pos_plus(self):
        return self.anchor + self.delta


@dataclass(frozen=True)
class BatchRow:
    pair: PairPlan
    hard_neg: int | None
    soft_neg: int | None
    mask_ratio_minus: float
    mask_ratio_plus: float


@dataclass(frozen=True)
class BatchPlan:
    """Columnar plan; row i describes anchor[i] and its four partner views.

    aug_seeds columns follow VIEW_ORDER; mask_seeds columns are (minus, plus).
    hard/soft are None when the plan was built without explicit negatives.
    """

    anchor: np.ndarray
    delta: np.ndarray
    hard: np.ndarray | None
    soft: np.ndarray | None
    ratio_minus: np.ndarray
    ratio_plus: np.ndarray
    aug_seeds: np.ndarray
    mask_seeds: np.ndarray

    VIEW_ORDER = ("anchor", "minus", "plus", "hard", "soft")

    @property
    def batch_size(self):
        return len(self.anchor)

    @property
    def minus(self):
        return self.anchor - self.delta

    @property
    def plus(self):
        return self.anchor + self.delta

    @property
    def has_negatives(self):
        return self.hard is not None

    def view_indices(self) -> np.ndarray:
        """Series indices of every view, stacked in VIEW_ORDER blocks of batch_size."""
        cols = [self.anchor, self.minus, self.plus]
        if self.has_negatives:
            cols += [self.hard, self.soft]
        return np.concatenate(cols)

    @property
    def rows(self) -> list[BatchRow]:
        out = []
        for i in range(self.batch_size):
            out.append(BatchRow(
                PairPlan(int(self.anchor[i]), int(self.delta[i])),
                None if self.hard is None else int(self.hard[i]),
                None if self.soft is None else int(self.soft[i]),
                float(self.ratio_minus[i]), float(self.ratio_plus[i])))
        return out

    def to_dict(self):
        return {k: (None if v is None else np.asarray(v).tolist()) for k, v in self.__dict__.items()}


def draw_deltas(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(np.arange(1, DELTA_MAX + 1), size=n, p=DELTA_PROBS)


def draw_delta(rng: np.random.Generator) -> int:
    return int(draw_deltas(rng, 1)[0])


def _two_sided(anchor, length, near, far):
    """Uniform draw setup over {i : near <= |i - anchor| <= far, 0 <= i < length}."""
    anchor = np.asarray(anchor, dtype=np.int64)
    left_lo = np.maximum(0, anchor - far)
    left_hi = anchor - near
    right_lo = anchor + near
    right_hi = np.minimum(length - 1, anchor + far)
    n_left = np.maximum(0, left_hi - left_lo + 1)
    n_right = np.maximum(0, right_hi - right_lo + 1)
    return left_lo, right_lo, n_left, n_right


def _draw_two_sided(anchor, length, near, far, rng, what):
    left_lo, right_lo, n_left, n_right = _two_sided(anchor, length, near, far)
    total = n_left + n_right
    if np.any(total == 0):
        bad = np.atleast_1d(anchor)[np.atleast_1d(total) == 0][:5]
        raise SamplerError(f"no {what} candidates for anchor(s) {bad.tolist()} in a series of length {length}")
    k = rng.integers(0, total)
    return np.where(k < n_left, left_lo + k, right_lo + (k - n_left))


def draw_hard_negatives(anchors, length, rng):
    return _draw_two_sided(anchors, length, HARD_MIN, HARD_MAX, rng, "hard-negative")


def draw_soft_negatives(anchors, length, rng):
    return _draw_two_sided(anchors, length, SOFT_MIN, max(length, 1), rng, "soft-negative")


def draw_hard_negative(anchor: int, bounds: int, rng, pair: PairPlan | None = None) -> int:
    if pair is not None and pair.anchor != anchor:
        raise SamplerError("pair does not belong to this anchor")
    return int(draw_hard_negatives(np.array([anchor]), bounds, rng)[0])


def draw_soft_negative(anchor: int, bounds: int, rng) -> int:
    return int(draw_soft_negatives(np.array([anchor]), bounds, rng)[0])


def anchor_pool(length: int, hard_negatives: bool = True) -> np.ndarray:
    """Anchors whose positives (and, if requested, negatives) all fit in the series."""
    t = np.arange(DELTA_MAX, length - DELTA_MAX)
    if hard_negatives and len(t):
        *_, nl, nr = _two_sided(t, length, HARD_MIN, HARD_MAX)
        *_, sl, sr = _two_sided(t, length, SOFT_MIN, length)
        t = t[(nl + nr > 0) & (sl + sr > 0)]
    if len(t) == 0:
        raise SamplerError(f"series of length {length} has no eligible anchors")
    return t


def plan_for_anchors(anchors, length, rng, hard_negatives=True) -> BatchPlan:
    anchors = np.asarray(anchors, dtype=np.int64)
    n = len(anchors)
    if np.any(anchors - DELTA_MAX < 0) or np.any(anchors + DELTA_MAX >= length):
        raise SamplerError("anchors too close to the series edge")
    delta = draw_deltas(rng, n)
    hard = soft = None
    if hard_negatives:
        hard = draw_hard_negatives(anchors, length, rng)
        soft = draw_soft_negatives(anchors, length, rng)
    ratios = rng.uniform(MASK_LOW, MASK_HIGH, size=(2, n))
    aug_seeds = rng.integers(0, SEED_HIGH, size=(n, 5))
    mask_seeds = rng.integers(0, SEED_HIGH, size=(n, 2))
    return BatchPlan(anchors, delta, hard, soft, ratios[0], ratios[1], aug_seeds, mask_seeds)


def build_batch_plan(pool, batch_size, rng, length, hard_negatives=True) -> BatchPlan:
    pool = np.asarray(pool)
    if len(pool) < batch_size:
        raise SamplerError(f"anchor pool of {len(pool)} cannot fill a batch of {batch_size}")
    anchors = rng.choice(pool, size=batch_size, replace=False)
    return plan_for_anchors(anchors, length, rng, hard_negatives)


def epoch_plans(pool, batch_size, rng, length, hard_negatives=True, max_batches=None):
    """One pass over a shuffled pool, dropping the final partial batch."""
    pool = np.asarray(pool)
    n_batches = len(pool) // batch_size
    if n_batches == 0:
        raise SamplerError(f"anchor pool of {len(pool)} cannot fill a batch of {batch_size}")
    if max_batches is not None:
        n_batches = min(n_batches, max_batches)
    order = rng.permutation(pool)
    for b in range(n_batches):
        yield plan_for_anchors(order[b * batch_size:(b + 1) * batch_size], length, rng, hard_negatives)


def check_plan(plan: BatchPlan, length: int) -> None:
    """Raise SamplerError if any row breaks a distance or ratio constraint."""
    a = plan.anchor
    problems = []
    if len(np.unique(a)) != len(a):
        problems.append("duplicate anchors")
    if np.any((plan.delta < 1) | (plan.delta > DELTA_MAX)):
        problems.append("delta out of range")
    if np.any(plan.minus < 0) or np.any(plan.plus >= length):
        problems.append("positive out of bounds")
    for r in (plan.ratio_minus, plan.ratio_plus):
        if np.any((r < MASK_LOW) | (r >= MASK_HIGH)):
            problems.append("mask ratio out of range")
    if plan.has_negatives:
        dh = np.abs(plan.hard - a)
        if np.any((dh < HARD_MIN) | (dh > HARD_MAX)) or np.any(dh <= plan.delta):
            problems.append("hard negative distance")
        if np.any(np.abs(plan.soft - a) < SOFT_MIN):
            problems.append("soft negative distance")
        for col in (plan.hard, plan.soft):
            if np.any((col < 0) | (col >= length)):
                problems.append("negative out of bounds")
    if problems:
        raise SamplerError("invalid batch plan: " + ", ".join(sorted(set(problems))))
