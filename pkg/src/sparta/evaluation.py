"""Field metrics, latent-space scores, smoothness statistics and projection plots."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import cdist

from .errors import MetricError

REALISM_EPS = 1e-12


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    std: Optional[float] = None
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise MetricError(f"metric {self.name} is not finite: {self.value}")
        if self.std is not None and self.std < 0:
            raise MetricError(f"metric {self.name} has negative std")

    def row(self):
        return {"name": self.name, "value": self.value, "std": self.std, **self.context}


def write_reports(reports, stem) -> tuple[Path, Path]:
    """Write reports to <stem>.json and <stem>.csv."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in reports]
    json_path, csv_path = stem.with_suffix(".json"), stem.with_suffix(".csv")
    json_path.write_text(json.dumps([asdict(r) for r in reports], indent=2, default=str) + "\n")
    keys = list(dict.fromkeys(k for row in rows for k in row))
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return json_path, csv_path


def _np(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# field metrics


def rrmse(x_hat, x) -> float:
    """Relative RMSE in percent, over the jointly flattened arrays."""
    x_hat, x = _np(x_hat), _np(x)
    if x_hat.shape != x.shape:
        raise MetricError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    ref = np.linalg.norm(x.ravel())
    if ref == 0:
        raise MetricError("RRMSE is undefined for an all-zero reference")
    return float(100 * np.linalg.norm((x_hat - x).ravel()) / ref)


def data_range_of(x) -> float:
    x = _np(x)
    rng = float(x.max() - x.min())
    if rng == 0:
        raise MetricError("data range of the reference is zero")
    return rng


def psnr(x_hat, x, data_range=None, cap=100.0) -> float:
    x_hat, x = _np(x_hat), _np(x)
    data_range = data_range_of(x) if data_range is None else data_range
    if data_range <= 0:
        raise MetricError("data range must be positive")
    mse = float(np.mean((x_hat - x) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(data_range**2 / mse))


def gaussian_window(size=7, sigma=1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x_hat, x, data_range=None, window=7, sigma=1.5) -> float:
    """Gaussian-window SSIM per 2-D field ('valid' windows), averaged over fields and channels."""
    x_hat, x = _np(x_hat), _np(x)
    if x_hat.shape != x.shape:
        raise MetricError(f"shape mismatch {x_hat.shape} vs {x.shape}")
    data_range = data_range_of(x) if data_range is None else data_range
    if data_range <= 0:
        raise MetricError("data range must be positive")
    if x.shape[-2] < window or x.shape[-1] < window:
        raise MetricError(f"fields of shape {x.shape[-2:]} are smaller than the {window}x{window} window")
    a = torch.from_numpy(x_hat.reshape(-1, 1, *x.shape[-2:]))
    b = torch.from_numpy(x.reshape(-1, 1, *x.shape[-2:]))
    w = torch.from_numpy(gaussian_window(window, sigma))[None, None]
    mu_a, mu_b = F.conv2d(a, w), F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a**2
    var_b = F.conv2d(b * b, w) - mu_b**2
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean(dim=(1, 2, 3)).mean())


def field_metrics(x_hat, x, cfg=None) -> dict:
    window = cfg.ssim_window if cfg else 7
    sigma = cfg.ssim_sigma if cfg else 1.5
    cap = cfg.psnr_cap if cfg else 100.0
    rng = data_range_of(x)
    return {"rrmse": rrmse(x_hat, x), "ssim": ssim(x_hat, x, rng, window, sigma), "psnr": psnr(x_hat, x, rng, cap)}


# ---------------------------------------------------------------------------
# latent-space scores


def latent_density(h_g, ground, sigma=20.0):
    """Mean Gaussian kernel between h_g and each ground-truth latent. Vectorized over rows of h_g."""
    h_g, ground = _np(h_g), _np(ground)
    single = h_g.ndim == 1
    d2 = cdist(np.atleast_2d(h_g), np.atleast_2d(ground), "sqeuclidean")
    out = np.exp(-d2 / (2 * sigma**2)).mean(axis=1)
    return float(out[0]) if single else out


def knn_radii(ground, k=5) -> np.ndarray:
    ground = _np(ground)
    if len(ground) <= k:
        raise ValueError(f"realism needs more than k={k} ground-truth points, got {len(ground)}")
    d = cdist(ground, ground)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def realism_score(h_g, ground, k=5, eps=REALISM_EPS, radii=None):
    """max_i radius_k(h_i) / ||h_g - h_i||, with the denominator clamped at eps."""
    h_g, ground = _np(h_g), _np(ground)
    radii = knn_radii(ground, k) if radii is None else radii
    single = h_g.ndim == 1
    dist = np.maximum(cdist(np.atleast_2d(h_g), ground), eps)
    out = (radii[None, :] / dist).max(axis=1)
    return float(out[0]) if single else out


def smoothness_report(embeddings) -> dict:
    """First- and second-order squared differences of a time-ordered (n, d) sequence."""
    e = _np(embeddings)
    if e.ndim != 2 or len(e) < 3:
        raise ValueError("smoothness needs at least three time-ordered embeddings")
    temporal = np.sum((e[1:] - e[:-1]) ** 2, axis=1)
    cycle = np.sum((e[:-2] - 2 * e[1:-1] + e[2:]) ** 2, axis=1)
    return {"temporal": temporal, "cycle": cycle,
            "temporal_mean": float(temporal.mean()), "temporal_std": float(temporal.std()),
            "cycle_mean": float(cycle.mean()), "cycle_std": float(cycle.std())}


def smoothness_reports(embeddings, context=None) -> list[MetricReport]:
    s = smoothness_report(embeddings)
    ctx = dict(context or {}, n=len(embeddings))
    return [MetricReport("temporal_distance", s["temporal_mean"], s["temporal_std"], ctx),
            MetricReport("cycle_distance", s["cycle_mean"], s["cycle_std"], ctx)]


def latent_std(samples) -> float:
    """Per-dimension std across generated draws (axis 0), averaged to one scalar."""
    return float(_np(samples).std(axis=0).mean())


# ---------------------------------------------------------------------------
# projections and plots


def pca_project(embeddings, n_components=2):
    """Deterministic PCA: each component's largest-magnitude loading is positive."""
    e = _np(embeddings)
    centered = e - e.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:n_components]
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    variance = s[:n_components] ** 2 / max(len(e) - 1, 1)
    return centered @ comps.T, comps, variance


def window_summaries(points, window=5, interval=1):
    """Mean of each look-back window and the next point after it, in projected space."""
    points = np.asarray(points)
    span = (window - 1) * interval
    means, nexts = [], []
    for start in range(0, len(points) - span - interval, window * interval):
        idx = start + interval * np.arange(window)
        means.append(points[idx].mean(axis=0))
        nexts.append(points[idx[-1] + interval])
    return np.array(means), np.array(nexts)


def latent_projection_plot(embeddings, path, method="pca", window=5, interval=1, title=None, seed=0):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    e = _np(embeddings)
    if len(e) < 2:
        raise ValueError("need at least two embeddings to plot")
    if method == "pca":
        pts = pca_project(e)[0]
    elif method == "tsne":
        from sklearn.manifold import TSNE

        pts = TSNE(2, perplexity=min(30.0, len(e) - 1.0), random_state=seed, init="pca").fit_transform(e)
    else:
        raise ValueError(f"unknown projection method {method!r}")

    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(pts[:, 0], pts[:, 1], "-", color="0.8", lw=0.8, zorder=1)
    ax.scatter(pts[:, 0], pts[:, 1], c=np.arange(len(pts)), cmap="viridis", s=10, zorder=2)
    means, nexts = window_summaries(pts, window, interval)
    if len(means):
        ax.scatter(means[:, 0], means[:, 1], marker="x", color="crimson", s=30, zorder=3, label="window mean")
        d = nexts - means
        ax.quiver(means[:, 0], means[:, 1], d[:, 0], d[:, 1], angles="xy", scale_units="xy", scale=1,
                  color="crimson", width=0.003, zorder=3)
        ax.legend(loc="best")
    ax.set_title(title or f"latent {method.upper()}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# diffusion protocol


def diffusion_eval(model, conditions, ground_latents, truth_fields, backbone, cfg=None, draws=20, seed=0,
                   stochastic=True, reuse_init=False, context=None) -> list[MetricReport]:
    """Per condition: `draws` generated latents; their averaged per-dim std, and the mean latent scored.

    The mean latent is decoded and compared with the ground-truth field (RRMSE) and scored
    against the ground-truth latent set (density, realism). Returns one report per metric.
    """
    from .downstream import diffusion_sample

    sigma = cfg.density_sigma if cfg else 20.0
    k = cfg.realism_k if cfg else 5
    radii = knn_radii(ground_latents, k)
    gen = torch.Generator().manual_seed(seed)
    n = len(conditions)
    init = None
    if reuse_init:
        init = torch.randn(conditions.shape[1:], generator=gen, dtype=conditions.dtype)
    samples = []
    for _ in range(draws):
        start = init.expand(n, -1).clone() if init is not None else None
        samples.append(diffusion_sample(model, conditions, gen, stochastic=stochastic, init=start)[0])
    samples = torch.stack(samples, dim=1)                     # (n, draws, d)
    stds = np.array([latent_std(s) for s in samples])
    mean_latent = samples.mean(dim=1)
    decoded = backbone.decode(mean_latent)
    rr = np.array([rrmse(decoded[i], truth_fields[i]) for i in range(n)])
    dens = np.atleast_1d(latent_density(mean_latent, ground_latents, sigma))
    real = np.atleast_1d(realism_score(mean_latent, ground_latents, k, radii=radii))
    ctx = dict(context or {}, task="diffusion", conditions=n, draws=draws)
    return [MetricReport(name, float(v.mean()), float(v.std()), ctx)
            for name, v in (("rrmse", rr), ("density", dens), ("realism", real), ("std", stds))]
