"""Gridded weather series: containers, splits, normalization, masking, augmentation.

Arrays follow the (C, H, W) layout with H the longitude axis and W the latitude
axis, so the default 5.625 degree grid is (5, 64, 32).
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DataError, DegenerateChannelError

CHANNELS = ("t2m", "z850", "u100", "v100", "q850")
FORMAT_VERSION = 1
DEFAULT_ORIGIN = "2000-01-01T00:00:00"
MIN_STD = 1e-8


@dataclass(frozen=True)
class GridSample:
    timestamp: int
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ContractError(f"expected a (C, H, W) array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"non-finite values in sample at t={self.timestamp}")


@dataclass(frozen=True)
class ObservationMask:
    kept: np.ndarray
    ratio: float

    @property
    def n_masked(self) -> int:
        return int((~self.kept).sum())


@dataclass(frozen=True)
class SeriesSplit:
    """A chronologically ordered run of samples stored as one T x C x H x W block."""

    values: np.ndarray
    timestamps: np.ndarray
    channels: tuple[str, ...]
    normalized: bool = False

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i) -> GridSample:
        return GridSample(int(self.timestamps[i]), self.values[i], self.normalized)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    def slice(self, start, stop) -> "SeriesSplit":
        return dataclasses.replace(self, values=self.values[start:stop], timestamps=self.timestamps[start:stop])


@dataclass(frozen=True)
class DatasetSplits:
    train: SeriesSplit
    val: SeriesSplit
    test: SeriesSplit
    downstream_train: SeriesSplit
    downstream_val: SeriesSplit
    downstream_test: SeriesSplit
    time_origin: str = DEFAULT_ORIGIN

    @property
    def channels(self) -> tuple[str, ...]:
        return self.train.channels

    def named(self) -> dict[str, SeriesSplit]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "time_origin"}

    def map(self, fn) -> "DatasetSplits":
        return dataclasses.replace(self, **{k: fn(v) for k, v in self.named().items()})


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    channels: tuple[str, ...] = CHANNELS

    def __post_init__(self):
        if np.any(self.std < MIN_STD):
            bad = [c for c, s in zip(self.channels, self.std) if s < MIN_STD]
            raise DegenerateChannelError(f"channel(s) {bad} have std below {MIN_STD}")

    def to_dict(self):
        return {"channels": list(self.channels), "mean": [float(m) for m in self.mean],
                "std": [float(s) for s in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   tuple(d["channels"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# container files


def save_container(path, values, timestamps, channels, time_origin=DEFAULT_ORIGIN):
    values = np.asarray(values, dtype=np.float32)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if values.ndim != 4 or values.shape[0] != len(timestamps) or values.shape[1] != len(channels):
        raise DataError(f"inconsistent container shapes: values {values.shape}, "
                        f"{len(timestamps)} timestamps, {len(channels)} channels")
    with open(path, "wb") as fh:
        np.savez(fh, format_version=np.int64(FORMAT_VERSION), values=values, timestamps=timestamps,
                 channels=np.asarray(channels, dtype=str), time_origin=np.asarray(time_origin))


def read_container(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset container not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported container version {version}")
        return z["values"], z["timestamps"], tuple(str(c) for c in z["channels"]), str(z["time_origin"])


def split_bounds(n, fractions=(0.6, 0.2, 0.2)):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    a = math.floor(fractions[0] * n)
    b = math.floor((fractions[0] + fractions[1]) * n)
    return a, b


def make_splits(values, timestamps, channels, fractions=(0.6, 0.2, 0.2), time_origin=DEFAULT_ORIGIN):
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if np.any(np.diff(timestamps) <= 0):
        raise DataError("timestamps are not strictly increasing")
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite values in series")
    full = SeriesSplit(values, timestamps, tuple(channels))
    a, b = split_bounds(len(full), fractions)
    test = full.slice(b, len(full))
    c, d = split_bounds(len(test), fractions)
    return DatasetSplits(full.slice(0, a), full.slice(a, b), test,
                         test.slice(0, c), test.slice(c, d), test.slice(d, len(test)), time_origin)


def select_channels(values, available, channels):
    missing = [c for c in channels if c not in available]
    if missing:
        raise ConfigError(f"channel(s) {missing} not in file (available: {list(available)})")
    idx = [available.index(c) for c in channels]
    return values[:, idx]


def load_gridded_series(path, channels=CHANNELS, split_fractions=(0.6, 0.2, 0.2)) -> DatasetSplits:
    values, timestamps, available, origin = read_container(path)
    values = select_channels(values, available, tuple(channels))
    return make_splits(values, timestamps, channels, split_fractions, origin)


# ---------------------------------------------------------------------------
# normalization


def compute_norm_stats(split) -> NormStats:
    if isinstance(split, SeriesSplit):
        arr, channels = split.values, split.channels
    else:
        arr = np.stack([s.values for s in split])
        channels = CHANNELS[: arr.shape[1]]
    arr = arr.astype(np.float64, copy=False)
    mean = arr.mean(axis=(0, 2, 3))
    std = arr.std(axis=(0, 2, 3))
    return NormStats(mean, std, tuple(channels))


def _apply(sample, fn, to_normalized):
    if sample.normalized == to_normalized:
        state = "normalized" if to_normalized else "physical"
        raise ContractError(f"sample is already in {state} units")
    return dataclasses.replace(sample, values=fn(sample.values), normalized=to_normalized)


def normalize(sample, stats: NormStats):
    """Per-channel standardization; accepts a GridSample or a SeriesSplit."""
    def fn(v):
        shape = (-1, 1, 1)
        out = (v - stats.mean.reshape(shape)) / stats.std.reshape(shape)
        return out.astype(v.dtype, copy=False)
    return _apply(sample, fn, True)


def denormalize(sample, stats: NormStats):
    def fn(v):
        shape = (-1, 1, 1)
        out = v * stats.std.reshape(shape) + stats.mean.reshape(shape)
        return out.astype(v.dtype, copy=False)
    return _apply(sample, fn, False)


# ---------------------------------------------------------------------------
# masking


def masked_cell_count(h, w, ratio) -> int:
    return math.floor(ratio * h * w)


def random_mask(h, w, ratio, seed) -> np.ndarray:
    """Boolean (h, w) array, False on exactly floor(ratio*h*w) cells."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n = masked_cell_count(h, w, ratio)
    kept = np.ones(h * w, dtype=bool)
    if n:
        kept[np.random.default_rng(seed).permutation(h * w)[:n]] = False
    return kept.reshape(h, w)


def mask_apply(sample: GridSample, ratio: float, seed: int):
    kept = random_mask(sample.values.shape[1], sample.values.shape[2], ratio, seed)
    values = np.where(kept[None], sample.values, 0).astype(sample.values.dtype, copy=False)
    return dataclasses.replace(sample, values=values), ObservationMask(kept, float(ratio))


def mask_batch(x: torch.Tensor, ratios: Sequence[float], seeds: Sequence[int]) -> torch.Tensor:
    """Zero-fill a (B, C, H, W) batch, one shared-across-channels mask per row."""
    h, w = x.shape[-2:]
    kept = np.stack([random_mask(h, w, r, s) for r, s in zip(ratios, seeds)])
    return x * torch.from_numpy(kept).to(x.dtype)[:, None]


# ---------------------------------------------------------------------------
# augmentation

UPSCALE = 2.5
CROP = 2.25
SMOOTH_KERNEL = 5


def augmentation_shapes(h, w):
    up = (round(UPSCALE * h), round(UPSCALE * w))
    crop = (round(CROP * h), round(CROP * w))
    return up, crop


def crop_offsets(seed, h, w):
    (uh, uw), (ch, cw) = augmentation_shapes(h, w)
    rng = np.random.default_rng(seed)
    return rng.uniform(0, uh - ch), rng.uniform(0, uw - cw)


def augment_batch(x: torch.Tensor, seeds: Sequence[int]) -> torch.Tensor:
    """Resize up, crop at a seeded (sub-pixel) offset, 5x5 box smooth, resize back."""
    b, c, h, w = x.shape
    (uh, uw), (ch, cw) = augmentation_shapes(h, w)
    up = F.interpolate(x, size=(uh, uw), mode="bilinear", align_corners=False)

    offsets = torch.tensor([crop_offsets(s, h, w) for s in seeds], dtype=x.dtype)
    rows = torch.arange(ch, dtype=x.dtype) + 0.5
    cols = torch.arange(cw, dtype=x.dtype) + 0.5
    # grid_sample wants (x=width coord, y=height coord) in [-1, 1]
    gy = (offsets[:, 0, None] + rows[None]) * (2.0 / uh) - 1.0
    gx = (offsets[:, 1, None] + cols[None]) * (2.0 / uw) - 1.0
    grid = torch.stack(torch.broadcast_tensors(gx[:, None, :], gy[:, :, None]), dim=-1)
    crop = F.grid_sample(up, grid, mode="bilinear", padding_mode="border", align_corners=False)

    pad = SMOOTH_KERNEL // 2
    smooth = F.avg_pool2d(F.pad(crop, (pad, pad, pad, pad), mode="reflect"), SMOOTH_KERNEL, stride=1)
    return F.interpolate(smooth, size=(h, w), mode="bilinear", align_corners=False)


def augment_view(sample: GridSample, seed: int) -> GridSample:
    x = torch.from_numpy(np.ascontiguousarray(sample.values))[None]
    out = augment_batch(x, [seed])[0].numpy()
    return dataclasses.replace(sample, values=out)


# ---------------------------------------------------------------------------
# seasons

_SEASON_OF_MONTH = {12: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1, 6: 2, 7: 2, 8: 2, 9: 3, 10: 3, 11: 3}


def parse_origin(origin) -> dt.datetime:
    if isinstance(origin, dt.datetime):
        return origin
    if isinstance(origin, dt.date):
        return dt.datetime(origin.year, origin.month, origin.day)
    return dt.datetime.fromisoformat(str(origin))


def season_label(timestamp: int, calendar_origin=DEFAULT_ORIGIN) -> int:
    """0 winter (DJF), 1 spring (MAM), 2 summer (JJA), 3 autumn (SON)."""
    when = parse_origin(calendar_origin) + dt.timedelta(hours=int(timestamp))
    return _SEASON_OF_MONTH[when.month]


def season_labels(timestamps, calendar_origin=DEFAULT_ORIGIN) -> np.ndarray:
    origin = parse_origin(calendar_origin)
    months = [(origin + dt.timedelta(hours=int(t))).month for t in timestamps]
    return np.array([_SEASON_OF_MONTH[m] for m in months], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic series


@dataclass(frozen=True)
class SynthConfig:
    height: int = 16
    width: int = 8
    length: int = 6000
    seed: int = 0
    noise: float = 0.05
    coupling: bool = True
    timestep_hours: int = 6
    # 365 days of 6-hourly steps; wave frequencies divide it so the series is exactly periodic
    year_steps: int = 1460
    wave_cycles: tuple[int, ...] = (73, 20)
    seasonal_modulation: float = 0.5
    time_origin: str = DEFAULT_ORIGIN
    channels: tuple[str, ...] = CHANNELS
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @property
    def period(self) -> int:
        return self.year_steps


# physical offset and scale per channel, loosely ERA5-like magnitudes
_PHYSICAL = {"t2m": (280.0, 12.0), "z850": (14000.0, 400.0), "u100": (2.0, 6.0),
             "v100": (0.0, 5.0), "q850": (0.006, 0.002)}


def _wave_group(rng, cfg, lon, lat, t, zonal_shift=0):
    """Sum of travelling waves; (T, H, W). Integer temporal cycles per year.

    zonal_shift moves the zonal wavenumbers out of the default 1..3 band; waves with
    different wavenumbers are orthogonal around the longitude circle.
    """
    field_ = np.zeros((len(t), len(lon), len(lat)))
    for cycles in cfg.wave_cycles:
        zonal = rng.integers(1, 4) + zonal_shift
        merid = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.6, 1.0)
        omega = 2 * np.pi * cycles / cfg.year_steps
        arg = zonal * lon[None, :, None] + merid * lat[None, None, :] - omega * t[:, None, None] + phase
        field_ += amp * np.sin(arg)
    return field_


def synth_series(cfg: SynthConfig):
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.length, dtype=np.float64)
    lon = 2 * np.pi * np.arange(cfg.height) / cfg.height
    lat = np.pi * (np.arange(cfg.width) + 0.5) / cfg.width - np.pi / 2

    annual = 2 * np.pi * t / cfg.year_steps
    amp = (1 + cfg.seasonal_modulation * np.cos(annual))[:, None, None]
    hemis = np.sin(lat)[None, None, :]

    thermal = _wave_group(rng, cfg, lon, lat, t)
    wind = _wave_group(rng, cfg, lon, lat, t)
    moist = _wave_group(rng, cfg, lon, lat, t)
    wind_v = wind if cfg.coupling else _wave_group(rng, cfg, lon, lat, t, zonal_shift=3)

    anomalies = {
        "t2m": amp * thermal - 1.5 * np.cos(annual)[:, None, None] * hemis - np.cos(lat)[None, None, :],
        "z850": 0.9 * amp * thermal - 1.0 * np.cos(annual)[:, None, None] * hemis,
        "u100": amp * wind,
        "v100": 0.9 * amp * wind_v,
        "q850": amp * moist + 1.2 * np.sin(annual)[:, None, None] * hemis,
    }
    out = np.empty((cfg.length, len(cfg.channels), cfg.height, cfg.width))
    for i, name in enumerate(cfg.channels):
        offset, scale = _PHYSICAL[name]
        out[:, i] = offset + scale * anomalies[name]
        if cfg.noise > 0:
            out[:, i] += scale * cfg.noise * rng.standard_normal(out[:, i].shape)
    timestamps = np.arange(cfg.length, dtype=np.int64) * cfg.timestep_hours
    return out, timestamps


def synth_generate(cfg: SynthConfig) -> DatasetSplits:
    values, timestamps = synth_series(cfg)
    return make_splits(values, timestamps, cfg.channels, cfg.split_fractions, cfg.time_origin)


# ---------------------------------------------------------------------------
# WeatherBench-style netCDF conversion


@dataclass(frozen=True)
class SourceVariable:
    directory: str
    variable: str
    level: int | None = None


WEATHERBENCH_SOURCES = {
    "t2m": SourceVariable("2m_temperature", "t2m"),
    "z850": SourceVariable("geopotential", "z", 850),
    "u100": SourceVariable("100m_u_component_of_wind", "u100"),
    "v100": SourceVariable("100m_v_component_of_wind", "v100"),
    "q850": SourceVariable("specific_humidity", "q", 850),
}


def _hours_since(units: str):
    # e.g. "hours since 1979-01-01 00:00:00" or "hours since 1979-01-01"
    unit, _, ref = units.partition(" since ")
    factor = {"hours": 1, "days": 24, "minutes": 1 / 60, "seconds": 1 / 3600}.get(unit.strip())
    if factor is None or not ref:
        raise DataError(f"unsupported time units {units!r}")
    return factor, dt.datetime.fromisoformat(ref.strip().replace("T", " ")[:19])


def _read_nc_variable(path, src: SourceVariable):
    import h5py

    with h5py.File(path, "r") as f:
        if src.variable not in f:
            raise DataError(f"{path}: variable {src.variable!r} missing")
        data = f[src.variable][()]
        if "scale_factor" in f[src.variable].attrs:
            data = data * f[src.variable].attrs["scale_factor"] + f[src.variable].attrs.get("add_offset", 0)
        units = f["time"].attrs["units"]
        units = units.decode() if isinstance(units, bytes) else str(units)
        factor, ref = _hours_since(units)
        hours = f["time"][()].astype(np.float64) * factor
        if src.level is not None:
            levels = list(f["level"][()])
            if src.level not in levels:
                raise DataError(f"{path}: level {src.level} not in {levels}")
            data = data[:, levels.index(src.level)]
    return ref, hours, np.asarray(data, dtype=np.float64)


def convert_weatherbench(input_dir, out_path, channels=CHANNELS, sources=None, time_origin=None):
    """Stack per-variable yearly netCDF4 files (time, lat, lon) into one container."""
    sources = {**WEATHERBENCH_SOURCES, **(sources or {})}
    input_dir = Path(input_dir)
    stacked, times = [], None
    for name in channels:
        if name not in sources:
            raise ConfigError(f"no source mapping for channel {name!r}")
        src = sources[name]
        files = sorted((input_dir / src.directory).glob("*.nc"))
        if not files:
            raise FileNotFoundError(f"no .nc files under {input_dir / src.directory}")
        parts = [_read_nc_variable(p, src) for p in files]
        origin = time_origin and parse_origin(time_origin)
        origin = origin or parts[0][0]
        hours = np.concatenate([(ref - origin).total_seconds() / 3600 + h for ref, h, _ in parts])
        data = np.concatenate([d for _, _, d in parts])
        order = np.argsort(hours, kind="stable")
        hours, data = hours[order], data[order]
        if times is None:
            times, time_origin = hours, origin.isoformat()
        elif not np.array_equal(times, hours):
            raise DataError(f"channel {name!r} has a different time axis")
        # (time, lat, lon) -> (time, lon, lat)
        stacked.append(np.swapaxes(data, 1, 2))
    values = np.stack(stacked, axis=1)
    save_container(out_path, values, np.rint(times).astype(np.int64), channels, time_origin)
    return out_path
