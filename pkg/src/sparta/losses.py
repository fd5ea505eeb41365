"""Training objectives: temporal NT-Xent, cycle consistency, reconstruction, blended total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractError

NORM_TOLERANCE = 1e-4


@dataclass(frozen=True)
class BlendSchedule:
    alpha_start: float = 1.0
    k: float = 0.01

    def __post_init__(self):
        if not 0 < self.alpha_start <= 1:
            raise ValueError(f"alpha_start must lie in (0, 1], got {self.alpha_start}")
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")


@dataclass(frozen=True)
class LossBreakdown:
    contrastive: float
    cycle: float
    recon: float
    total: float
    alpha: float
    recon_views: float = 0.0

    def recompute_total(self):
        return self.alpha * (self.contrastive + self.cycle + self.recon_views) + (1 - self.alpha) * self.recon


def alpha_at_epoch(schedule: BlendSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.alpha_start * math.exp(-schedule.k * epoch)


def temporal_contrastive(z, anchors, positives, tau=0.3):
    """NT-Xent over temporal positives.

    z holds every view projection of the batch (rows L2-normalized); anchors is (N,)
    and positives (N, K) index rows of z. Each (anchor, positive) pair contributes
    the loss in both directions; denominators run over all other views in the
    batch, negatives included. The sum is divided by 2N, so K=1 reduces to SimCLR.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    norms = z.detach().norm(dim=1)
    if torch.any((norms - 1).abs() > NORM_TOLERANCE):
        raise ContractError("projections must be L2-normalized before the contrastive loss")
    anchors = torch.as_tensor(anchors, dtype=torch.long)
    positives = torch.as_tensor(positives, dtype=torch.long)
    if positives.ndim == 1:
        positives = positives[:, None]
    n, k = positives.shape

    logits = z @ z.T / tau
    self_mask = torch.eye(len(z), dtype=torch.bool)
    log_prob = logits - torch.logsumexp(logits.masked_fill(self_mask, float("-inf")), dim=1, keepdim=True)

    a = anchors[:, None].expand(n, k)
    total = -(log_prob[a, positives] + log_prob[positives, a]).sum()
    return total / (2 * n)


def cycle_penalty(h_minus, h_anchor, h_plus):
    """Mean squared second-order central difference across (t - delta, t, t + delta)."""
    return (h_plus - 2 * h_anchor + h_minus).pow(2).mean()


def recon_mse(x_hat, x):
    """Per-channel MSE summed over channels."""
    if x_hat.shape != x.shape:
        raise ContractError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return (x_hat - x).pow(2).mean(dim=(0, 2, 3)).sum()


def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def stage2_total(contrastive, cycle, recon_views, recon_anchor, alpha):
    """Blended objective; returns the differentiable total and a float breakdown."""
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    total = alpha * (contrastive + cycle + recon_views) + (1 - alpha) * recon_anchor
    parts = LossBreakdown(_scalar(contrastive), _scalar(cycle), _scalar(recon_anchor), _scalar(total), float(alpha),
                          _scalar(recon_views))
    return total, parts
