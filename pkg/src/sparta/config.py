"""Run configuration. Defaults are the published hyperparameters wherever one exists."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import CHANNELS, SynthConfig
from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSection(_Section):
    height: int = Field(16, ge=2)
    width: int = Field(8, ge=2)
    length: int = Field(6000, ge=16)
    seed: Optional[int] = None
    noise: float = Field(0.05, ge=0)
    coupling: bool = True
    timestep_hours: int = Field(6, ge=1)
    year_steps: int = Field(1460, ge=4)
    wave_cycles: tuple[int, ...] = (73, 20)
    seasonal_modulation: float = 0.5

    def to_synth(self, seed, channels, fractions) -> SynthConfig:
        fields = self.model_dump(exclude={"seed"})
        return SynthConfig(**fields, seed=self.seed if self.seed is not None else seed,
                           channels=tuple(channels), split_fractions=tuple(fractions))


class DataSection(_Section):
    path: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None
    channels: tuple[str, ...] = CHANNELS
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)

    @model_validator(mode="before")
    @classmethod
    def _default_source(cls, data):
        if isinstance(data, dict) and data.get("path") is None and data.get("synthetic") is None:
            data = {**data, "synthetic": {}}
        return data

    @model_validator(mode="after")
    def _check(self):
        if self.path is not None and self.synthetic is not None:
            raise ValueError("give either data.path or data.synthetic, not both")
        if abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        return self


class SamplerSection(_Section):
    hard_negatives: bool = True


class NetworksSection(_Section):
    fusion: Literal["early", "attention", "gnn"] = "early"
    embedding_dim: int = Field(1000, ge=1)
    projection_dim: int = Field(128, ge=1)
    encoder_width: int = Field(64, ge=1)
    decoder_start_channels: int = Field(512, ge=1)
    decoder_blocks: int = Field(5, ge=1)
    attention_heads: int = Field(8, ge=1)
    graph_edges: tuple[tuple[str, str], ...] = (("u100", "v100"), ("t2m", "z850"))


class LossesSection(_Section):
    tau: float = Field(0.3, gt=0)
    cycle: bool = True
    alpha_start: float = Field(1.0, gt=0, le=1)
    k: float = Field(0.01, ge=0)


class StageSection(_Section):
    epochs: int = Field(ge=0)
    lr: float = Field(gt=0)
    batch_size: int = Field(128, ge=1)
    max_batches_per_epoch: Optional[int] = Field(None, ge=1)


class TrainerSection(_Section):
    pretrain: StageSection = StageSection(epochs=100, lr=1e-4)
    blend: StageSection = StageSection(epochs=250, lr=1e-4)
    decoder: StageSection = StageSection(epochs=200, lr=1e-4)
    baseline: StageSection = StageSection(epochs=180, lr=1e-3)
    scheduler_factor: float = Field(0.1, gt=0, lt=1)
    scheduler_patience: int = Field(10, ge=1)
    grad_clip: Optional[float] = Field(None, gt=0)
    val_max_batches: Optional[int] = Field(None, ge=1)
    deterministic: bool = True


class ForecastSection(_Section):
    settings: tuple[tuple[int, int], ...] = ((30, 1), (5, 5), (5, 10))
    rollout: int = Field(100, ge=1)
    horizons: tuple[int, ...] = (25, 50, 75, 100)
    mask_ratio: float = Field(0.7, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-2, gt=0)
    epochs: int = Field(100, ge=0)
    layers: int = Field(2, ge=1)
    seeds: int = Field(3, ge=1)
    max_windows: Optional[int] = Field(None, ge=1)


class DiffusionSection(_Section):
    steps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, ge=0, lt=1)
    beta_end: float = Field(0.02, ge=0, lt=1)
    mask_ratio: float = Field(0.7, ge=0, lt=1)
    epochs: int = Field(300, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-2, gt=0)
    eval_batches: int = Field(20, ge=1)
    eval_conditions: int = Field(64, ge=1)


class ClassifySection(_Section):
    hidden: int = Field(256, ge=1)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-2, gt=0)
    mask_low: float = Field(0.2, ge=0, lt=1)
    mask_high: float = Field(0.9, gt=0, le=1)


class DownstreamSection(_Section):
    forecast: ForecastSection = ForecastSection()
    diffusion: DiffusionSection = DiffusionSection()
    classify: ClassifySection = ClassifySection()


class EvaluationSection(_Section):
    density_sigma: float = Field(20.0, gt=0)
    realism_k: int = Field(5, ge=1)
    smoothness_batch: int = Field(256, ge=3)
    psnr_cap: float = Field(100.0, gt=0)
    ssim_window: int = Field(7, ge=1)
    ssim_sigma: float = Field(1.5, gt=0)


class RunConfig(_Section):
    seed: int = 0
    run_name: str = "sparta"
    data: DataSection = DataSection()
    sampler: SamplerSection = SamplerSection()
    networks: NetworksSection = NetworksSection()
    losses: LossesSection = LossesSection()
    trainer: TrainerSection = TrainerSection()
    downstream: DownstreamSection = DownstreamSection()
    evaluation: EvaluationSection = EvaluationSection()

    @field_validator("run_name")
    @classmethod
    def _safe_name(cls, v):
        if not v or any(c in v for c in "/\\") or v.startswith("."):
            raise ValueError("run_name must be a plain directory name")
        return v

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(json.loads(self.canonical()), sort_keys=True)

    def with_overrides(self, **sections) -> "RunConfig":
        """Deep-merge plain dicts into a copy, revalidating the result."""
        return config_from_dict(_merge(json.loads(self.canonical()), sections))


def _merge(base, extra):
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def config_from_dict(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config document must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_error(err)) from None


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config {path}: {err}") from None
    return config_from_dict(data)


def toy_config(seed=0, **overrides) -> RunConfig:
    """The desk-scale setup: synthetic 16x8 grid, d=32, short stages."""
    base = {
        "seed": seed,
        "run_name": "toy",
        # a 292-step, 30-hourly "year" so every split covers all four seasons
        "data": {"synthetic": {"height": 16, "width": 8, "length": 6000, "timestep_hours": 30,
                               "year_steps": 292, "wave_cycles": [15, 4]}},
        "networks": {"embedding_dim": 32, "projection_dim": 16, "encoder_width": 8,
                     "decoder_start_channels": 32, "decoder_blocks": 3},
        "trainer": {
            "pretrain": {"epochs": 20, "lr": 1e-3, "batch_size": 32, "max_batches_per_epoch": 30},
            "blend": {"epochs": 30, "lr": 1e-3, "batch_size": 32, "max_batches_per_epoch": 30},
            "decoder": {"epochs": 20, "lr": 1e-3, "batch_size": 32, "max_batches_per_epoch": 30},
            "baseline": {"epochs": 20, "lr": 1e-3, "batch_size": 32, "max_batches_per_epoch": 30},
            "val_max_batches": 2,
        },
        "downstream": {
            "forecast": {"settings": [[30, 1]], "epochs": 30, "lr": 1e-3, "seeds": 1},
            "diffusion": {"steps": 100, "epochs": 50, "lr": 1e-3, "eval_conditions": 16},
            "classify": {"hidden": 32, "epochs": 30, "lr": 1e-3},
        },
    }
    return config_from_dict(_merge(base, overrides))
