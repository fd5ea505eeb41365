"""Frozen-backbone heads: seq2seq latent forecaster, conditional latent diffusion, season classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SeriesSplit, mask_batch, season_labels
from .errors import ContractError
from .evaluation import MetricReport, field_metrics
from .networks import SpartaModel, _norm, parameter_digest, seeded

N_SEASONS = 4


class FrozenBackbone:
    """Eval-mode encoder/decoder with gradients switched off."""

    def __init__(self, model: SpartaModel, batch_size=256):
        self.model = model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.batch_size = batch_size
        self.dtype = next(model.parameters()).dtype
        self._digest = parameter_digest(model)

    @property
    def dim(self):
        return self.model.decoder.fc.in_features

    def assert_frozen(self):
        if self.model.training or any(p.requires_grad for p in self.model.parameters()):
            raise ContractError("backbone must be frozen (eval mode, no gradients)")
        if parameter_digest(self.model) != self._digest:
            raise ContractError("backbone parameters changed")

    def digest(self):
        return parameter_digest(self.model)

    @torch.no_grad()
    def embed(self, x) -> torch.Tensor:
        x = torch.as_tensor(x).to(self.dtype)
        return torch.cat([self.model.encode(x[i:i + self.batch_size]) for i in range(0, len(x), self.batch_size)])

    @torch.no_grad()
    def decode(self, h) -> torch.Tensor:
        return torch.cat([self.model.decode(h[i:i + self.batch_size]) for i in range(0, len(h), self.batch_size)])

    def embed_split(self, split: SeriesSplit, mask_ratio=None, seed=0, ratio_range=None):
        """Embeddings of every sample, optionally masked with per-sample seeds derived from `seed`."""
        x = torch.from_numpy(np.ascontiguousarray(split.values)).to(self.dtype)
        if mask_ratio is not None or ratio_range is not None:
            rng = np.random.default_rng(seed)
            if ratio_range is not None:
                ratios = rng.uniform(*ratio_range, size=len(x))
            else:
                ratios = np.full(len(x), mask_ratio)
            x = mask_batch(x, ratios, rng.integers(0, 2**31 - 1, size=len(x)))
        return self.embed(x)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield torch.from_numpy(order[i:i + batch_size])


def _fit(model, params, loss_fn, n_train, val_fn, epochs, batch_size, lr, seed):
    """Adam loop shared by the heads; keeps the parameters with the best validation loss."""
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    best, best_state, history = math.inf, None, []
    for epoch in range(epochs):
        model.train()
        for idx in _batches(n_train, batch_size, rng):
            loss = loss_fn(idx)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val = float(val_fn())
        history.append(val)
        if val < best:
            best = val
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return history


# ---------------------------------------------------------------------------
# forecasting


class Seq2SeqForecaster(nn.Module):
    """Encoder LSTM reads the look-back window, decoder LSTM emits the next embedding.

    Latents are standardized with stored train statistics and the head predicts the
    change from the last look-back embedding.
    """

    def __init__(self, dim, hidden=None, layers=2):
        super().__init__()
        hidden = hidden or dim
        self.encoder = nn.LSTM(dim, hidden, layers, batch_first=True)
        self.decoder = nn.LSTM(dim, hidden, layers, batch_first=True)
        self.head = nn.Linear(hidden, dim)
        self.register_buffer("mean", torch.zeros(dim))
        self.register_buffer("std", torch.ones(dim))

    def fit_scaler(self, h):
        self.mean.copy_(h.mean(dim=0))
        self.std.copy_(h.std(dim=0).clamp_min(1e-6))

    def _step(self, x, state):
        out, state = self.decoder(x[:, None], state)
        return x + self.head(out[:, -1]), state

    def forward(self, window):
        """(B, LB, d) look-back embeddings -> (B, d) next embedding, decoder state."""
        x = (window - self.mean) / self.std
        _, state = self.encoder(x)
        pred, state = self._step(x[:, -1], state)
        return pred * self.std + self.mean, state

    def rollout(self, window, steps):
        """Autoregressive: after the first step each prediction is the next decoder input."""
        x = (window - self.mean) / self.std
        _, state = self.encoder(x)
        preds, last = [], x[:, -1]
        for _ in range(steps):
            last, state = self._step(last, state)
            preds.append(last)
        return torch.stack(preds, dim=1) * self.std + self.mean


@dataclass(frozen=True)
class ForecastSetting:
    lookback: int = 30
    interval: int = 1


def window_span(setting: ForecastSetting) -> int:
    """Look-back points: t, t+S, ..., t+LB*S (the window spans LB intervals)."""
    return setting.lookback + 1


def window_starts(length, setting: ForecastSetting, horizon=1):
    """Start indices t whose look-back and `horizon` future steps fit in the series."""
    last = length - 1 - (setting.lookback + horizon) * setting.interval
    return np.arange(0, max(last + 1, 0))


def window_indices(start, setting: ForecastSetting, horizon=1):
    """Look-back indices and the `horizon` future indices that follow, both spaced by S."""
    lb = start + setting.interval * np.arange(window_span(setting))
    fut = start + setting.interval * (setting.lookback + 1 + np.arange(horizon))
    return lb, fut


def _windows(h_in, h_target, starts, setting):
    lb, fut = window_indices(np.asarray(starts)[:, None], setting)
    return h_in[torch.from_numpy(lb)], h_target[torch.from_numpy(fut[:, 0])]


@dataclass
class ForecastData:
    """Masked look-back embeddings and complete target embeddings for one split."""

    masked: torch.Tensor
    full: torch.Tensor
    fields: torch.Tensor


def forecast_data(backbone: FrozenBackbone, split: SeriesSplit, mask_ratio=0.7, seed=0) -> ForecastData:
    fields = torch.from_numpy(np.ascontiguousarray(split.values)).to(backbone.dtype)
    return ForecastData(backbone.embed_split(split, mask_ratio, seed), backbone.embed(fields), fields)


def train_forecaster(backbone: FrozenBackbone, train: ForecastData, val: ForecastData, setting: ForecastSetting,
                     cfg, seed=0):
    backbone.assert_frozen()
    dim = train.full.shape[1]
    with seeded(seed):
        model = Seq2SeqForecaster(dim, layers=cfg.layers).to(train.full.dtype)
    model.fit_scaler(train.full)
    tr_starts = window_starts(len(train.full), setting)
    va_starts = window_starts(len(val.full), setting)
    x_tr, y_tr = _windows(train.masked, train.full, tr_starts, setting)
    x_va, y_va = _windows(val.masked, val.full, va_starts, setting)

    def loss_fn(idx):
        return F.mse_loss(model(x_tr[idx])[0], y_tr[idx])

    history = _fit(model, model.parameters(), loss_fn, len(x_tr), lambda: F.mse_loss(model(x_va)[0], y_va),
                   cfg.epochs, cfg.batch_size, cfg.lr, seed)
    backbone.assert_frozen()
    return model, history


@torch.no_grad()
def forecast_rollout(model: Seq2SeqForecaster, lookback, steps=100, backbone: FrozenBackbone = None):
    """Autoregressive rollout from (LB, d) or (B, LB, d) embeddings; decodes every step if a backbone is given."""
    single = lookback.ndim == 2
    window = lookback[None] if single else lookback
    model.eval()
    latents = model.rollout(window, steps)
    decoded = None
    if backbone is not None:
        b, s, d = latents.shape
        decoded = backbone.decode(latents.reshape(b * s, d))
        decoded = decoded.reshape(b, s, *decoded.shape[1:])
    if single:
        latents = latents[0]
        decoded = decoded[0] if decoded is not None else None
    return latents, decoded


@torch.no_grad()
def one_step_scores(model, data: ForecastData, setting: ForecastSetting) -> dict:
    starts = window_starts(len(data.full), setting)
    x, y = _windows(data.masked, data.full, starts, setting)
    pred = model(x)[0]
    return {"forecast_mse": float(F.mse_loss(pred, y)), "persistence_mse": float(F.mse_loss(x[:, -1], y))}


def _spread(starts, limit):
    if limit is None or len(starts) <= limit:
        return starts
    return starts[np.linspace(0, len(starts) - 1, limit).round().astype(int)]


@torch.no_grad()
def evaluate_rollout(model, backbone, data: ForecastData, setting: ForecastSetting, steps, horizons,
                     norm_stats=None, max_windows=None, eval_cfg=None, context=None):
    """Forecast vs persistence field metrics at each horizon, in normalized (and physical) units."""
    starts = _spread(window_starts(len(data.full), setting, steps), max_windows)
    if len(starts) == 0:
        raise ValueError(f"test split of length {len(data.full)} is too short for a {steps}-step rollout")
    lb, fut = window_indices(starts[:, None], setting, steps)
    window = data.masked[torch.from_numpy(lb)]
    latents = model.rollout(window, steps)
    reports = []
    for t in horizons:
        if t > steps:
            continue
        truth = data.fields[torch.from_numpy(fut[:, t - 1])]
        preds = {"forecast": backbone.decode(latents[:, t - 1]), "persistence": backbone.decode(window[:, -1])}
        for name, pred in preds.items():
            for units, (p, x) in _unit_pairs(pred, truth, norm_stats).items():
                for metric, value in field_metrics(p, x, eval_cfg).items():
                    ctx = dict(context or {}, model=name, horizon=t, units=units,
                               lookback=setting.lookback, interval=setting.interval, windows=len(starts))
                    reports.append(MetricReport(metric, value, None, ctx))
    return reports


def _unit_pairs(pred, truth, norm_stats):
    pairs = {"normalized": (pred, truth)}
    if norm_stats is not None:
        mean = torch.as_tensor(norm_stats.mean, dtype=pred.dtype).view(1, -1, 1, 1)
        std = torch.as_tensor(norm_stats.std, dtype=pred.dtype).view(1, -1, 1, 1)
        pairs["physical"] = (pred * std + mean, truth * std + mean)
    return pairs


# ---------------------------------------------------------------------------
# conditional latent diffusion


class NoiseSchedule:
    """Linear beta schedule; index t runs 1..T as in the sampler loop."""

    def __init__(self, betas):
        self.betas = torch.as_tensor(betas, dtype=torch.float64)
        self.alphas = 1 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        self.steps = len(self.betas)

    @classmethod
    def linear(cls, steps=1000, beta_start=1e-4, beta_end=0.02):
        return cls(torch.linspace(beta_start, beta_end, steps, dtype=torch.float64))

    def sigma(self, t):
        return torch.sqrt(self.betas[t - 1])


def q_sample(h0, t, eps, schedule: NoiseSchedule):
    """Noised latent sqrt(abar_t) h0 + sqrt(1 - abar_t) eps; t may be a per-row tensor."""
    ab = schedule.alpha_bars.to(h0.dtype)[torch.as_tensor(t) - 1]
    if ab.ndim:
        ab = ab.view(-1, *([1] * (h0.ndim - 1)))
    return ab.sqrt() * h0 + (1 - ab).sqrt() * eps


def denoise_step(h_t, eps_hat, t: int, schedule: NoiseSchedule, noise=None):
    """h_{t-1} = (h_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t) + sigma_t * noise."""
    a = float(schedule.alphas[t - 1])
    ab = float(schedule.alpha_bars[t - 1])
    coef = (1 - a) / math.sqrt(1 - ab) if ab < 1 else 0.0
    out = (h_t - coef * eps_hat) / math.sqrt(a)
    if noise is not None:
        out = out + float(schedule.sigma(t)) * noise
    return out


def timestep_embedding(t, dim, max_period=10000.0):
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class CrossAttentionBlock(nn.Module):
    """Linear -> GroupNorm -> SiLU, timestep shift, then cross-attention on the condition."""

    def __init__(self, cin, cout, time_dim, cond_dim):
        super().__init__()
        self.linear = nn.Linear(cin, cout)
        self.norm = _norm(cout)
        self.time = nn.Linear(time_dim, cout)
        self.attn_norm = nn.LayerNorm(cout)
        self.attn = nn.MultiheadAttention(cout, 1, kdim=cond_dim, vdim=cond_dim, batch_first=True)

    def forward(self, x, temb, cond):
        x = F.silu(self.norm(self.linear(x))) + self.time(temb)
        q = self.attn_norm(x)[:, None]
        attended, _ = self.attn(q, cond[:, None], cond[:, None], need_weights=False)
        return x + attended[:, 0]


class ConditionalLinearUNet(nn.Module):
    def __init__(self, dim, cond_dim=None):
        super().__init__()
        cond_dim = cond_dim or dim
        w = [dim, max(dim // 2, 2), max(dim // 4, 2)]
        self.time_dim = dim
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.down = nn.ModuleList([CrossAttentionBlock(dim, w[0], dim, cond_dim),
                                   CrossAttentionBlock(w[0], w[1], dim, cond_dim),
                                   CrossAttentionBlock(w[1], w[2], dim, cond_dim)])
        self.mid = CrossAttentionBlock(w[2], w[2], dim, cond_dim)
        self.up = nn.ModuleList([CrossAttentionBlock(2 * w[2], w[1], dim, cond_dim),
                                 CrossAttentionBlock(2 * w[1], w[0], dim, cond_dim),
                                 CrossAttentionBlock(2 * w[0], dim, dim, cond_dim)])
        self.out = nn.Linear(dim, dim)

    def forward(self, h, t, cond):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(h.dtype).expand(len(h), -1))
        skips, x = [], h
        for block in self.down:
            x = block(x, temb, cond)
            skips.append(x)
        x = self.mid(x, temb, cond)
        for block in self.up:
            x = block(torch.cat([x, skips.pop()], dim=1), temb, cond)
        return self.out(x)


class LatentScaler:
    """Per-dimension standardization of latents fed to the diffusion model."""

    def __init__(self, mean, std):
        self.mean = mean
        self.std = std.clamp_min(1e-6)

    @classmethod
    def fit(cls, h):
        return cls(h.mean(dim=0), h.std(dim=0))

    def scale(self, h):
        return (h - self.mean) / self.std

    def unscale(self, h):
        return h * self.std + self.mean


@dataclass
class DiffusionModel:
    net: ConditionalLinearUNet
    schedule: NoiseSchedule
    scaler: LatentScaler

    def predict_noise(self, h_t, t, cond):
        return self.net(h_t, t, cond)


@dataclass
class DiffusionData:
    clean: torch.Tensor
    condition: torch.Tensor
    fields: torch.Tensor


def diffusion_data(backbone: FrozenBackbone, split: SeriesSplit, mask_ratio=0.7, seed=0) -> DiffusionData:
    fields = torch.from_numpy(np.ascontiguousarray(split.values)).to(backbone.dtype)
    return DiffusionData(backbone.embed(fields), backbone.embed_split(split, mask_ratio, seed), fields)


def noise_mse(model: DiffusionModel, data: DiffusionData, generator: torch.Generator):
    h0 = model.scaler.scale(data.clean)
    cond = model.scaler.scale(data.condition)
    t = torch.randint(1, model.schedule.steps + 1, (len(h0),), generator=generator)
    eps = torch.randn(h0.shape, generator=generator, dtype=h0.dtype)
    return F.mse_loss(model.predict_noise(q_sample(h0, t, eps, model.schedule), t, cond), eps)


def train_diffusion(backbone: FrozenBackbone, train: DiffusionData, val: DiffusionData, cfg, seed=0):
    backbone.assert_frozen()
    dim = train.clean.shape[1]
    with seeded(seed):
        net = ConditionalLinearUNet(dim).to(train.clean.dtype)
    model = DiffusionModel(net, NoiseSchedule.linear(cfg.steps, cfg.beta_start, cfg.beta_end),
                           LatentScaler.fit(train.clean))
    gen = torch.Generator().manual_seed(seed)

    def loss_fn(idx):
        return noise_mse(model, DiffusionData(train.clean[idx], train.condition[idx], train.fields[:0]), gen)

    def val_fn():
        return noise_mse(model, val, torch.Generator().manual_seed(seed + 1))

    history = _fit(net, net.parameters(), loss_fn, len(train.clean), val_fn, cfg.epochs, cfg.batch_size, cfg.lr,
                   seed)
    backbone.assert_frozen()
    return model, history


@torch.no_grad()
def diffusion_sample(model: DiffusionModel, condition, generator: torch.Generator, backbone=None,
                     stochastic=True, init=None):
    """Reverse process from pure noise; returns unscaled latents and, with a backbone, decoded fields."""
    cond = model.scaler.scale(condition)
    h = init.clone() if init is not None else torch.randn(cond.shape, generator=generator, dtype=cond.dtype)
    model.net.eval()
    for t in range(model.schedule.steps, 0, -1):
        eps_hat = model.predict_noise(h, torch.full((len(h),), t), cond)
        noise = torch.randn(h.shape, generator=generator, dtype=h.dtype) if stochastic else None
        h = denoise_step(h, eps_hat, t, model.schedule, noise)
    latents = model.scaler.unscale(h)
    return latents, (backbone.decode(latents) if backbone is not None else None)


# ---------------------------------------------------------------------------
# season classification


class SeasonClassifier(nn.Module):
    def __init__(self, dim, hidden=256, classes=N_SEASONS):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, classes))

    def forward(self, h):
        return self.net(h)


def classify(model: SeasonClassifier, h) -> torch.Tensor:
    model.eval()
    with torch.no_grad():
        return model(h)


def season_cross_entropy(logits, labels) -> float:
    return float(F.cross_entropy(torch.as_tensor(logits), torch.as_tensor(labels)))


@dataclass
class ClassifyData:
    embeddings: torch.Tensor
    labels: torch.Tensor


def classify_data(backbone: FrozenBackbone, split: SeriesSplit, time_origin, cfg, seed=0) -> ClassifyData:
    h = backbone.embed_split(split, ratio_range=(cfg.mask_low, cfg.mask_high), seed=seed)
    return ClassifyData(h, torch.from_numpy(season_labels(split.timestamps, time_origin)))


def train_classifier(backbone: FrozenBackbone, train: ClassifyData, val: ClassifyData, cfg, seed=0):
    backbone.assert_frozen()
    with seeded(seed):
        model = SeasonClassifier(train.embeddings.shape[1], cfg.hidden).to(train.embeddings.dtype)

    def loss_fn(idx):
        return F.cross_entropy(model(train.embeddings[idx]), train.labels[idx])

    history = _fit(model, model.parameters(), loss_fn, len(train.labels),
                   lambda: F.cross_entropy(model(val.embeddings), val.labels), cfg.epochs, cfg.batch_size, cfg.lr,
                   seed)
    backbone.assert_frozen()
    return model, history
