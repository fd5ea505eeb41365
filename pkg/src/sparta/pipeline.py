"""Glue between configuration, data, training stages and the downstream heads.

Everything here is what the CLI calls; tests drive the same functions directly.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import downstream as ds
from .config import RunConfig
from .data import (DatasetSplits, NormStats, compute_norm_stats, load_gridded_series, normalize, save_container,
                   synth_series)
from .errors import ConfigError
from .evaluation import MetricReport, field_metrics, smoothness_reports, write_reports
from .trainer import (STAGES, TrainState, configure_determinism, derive_seeds, init_state, load_checkpoint,
                      run_stage)

RUN_ROOT_ENV = "SPARTA_RUN_ROOT"
# each stage continues from the final checkpoint of the one before it
PREVIOUS_STAGE = {"blend": "pretrain", "decoder": "blend"}
TASKS = ("forecast", "diffusion", "classify")
EVAL_TASKS = TASKS + ("smoothness", "reconstruction")


# ---------------------------------------------------------------------------
# data


def raw_splits(cfg: RunConfig) -> DatasetSplits:
    d = cfg.data
    if d.path is not None:
        path = Path(d.path)
        if not path.exists():
            raise FileNotFoundError(f"data file not found: {path}")
        return load_gridded_series(path, d.channels, d.split_fractions)
    from .data import make_splits

    synth = d.synthetic.to_synth(derive_seeds(cfg.seed)["data"], d.channels, d.split_fractions)
    values, timestamps = synth_series(synth)
    return make_splits(values, timestamps, synth.channels, synth.split_fractions, synth.time_origin)


def load_splits(cfg: RunConfig, norm_stats: NormStats = None) -> tuple[DatasetSplits, NormStats]:
    """Normalized splits. Statistics come from the training split unless given (e.g. from a checkpoint)."""
    splits = raw_splits(cfg)
    stats = norm_stats or compute_norm_stats(splits.train)
    return splits.map(lambda s: normalize(s, stats)), stats


def prepare_data(cfg: RunConfig, out_path) -> Path:
    """Write the configured synthetic series to a container file."""
    if cfg.data.synthetic is None:
        raise ConfigError("prepare-data needs a data.synthetic section")
    synth = cfg.data.synthetic.to_synth(derive_seeds(cfg.seed)["data"], cfg.data.channels, cfg.data.split_fractions)
    values, timestamps = synth_series(synth)
    return save_container(out_path, values, timestamps, synth.channels, synth.time_origin)


# ---------------------------------------------------------------------------
# run directories


def run_root(root=None) -> Path:
    return Path(root or os.environ.get(RUN_ROOT_ENV, "runs"))


@dataclass
class RunDirectory:
    """runs/<name>-<config hash>-seed<seed>/ with config snapshot, seeds, norm stats, metrics, checkpoints."""

    path: Path

    @classmethod
    def for_config(cls, cfg: RunConfig, root=None) -> "RunDirectory":
        return cls(run_root(root) / f"{cfg.run_name}-{cfg.digest[:12]}-seed{cfg.seed}")

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def metrics(self) -> Path:
        return self.path / "metrics.csv"

    def checkpoint(self, stage, tag="final") -> Path:
        return self.checkpoints / f"{stage}-{tag}.pt"

    def init(self, cfg: RunConfig, norm_stats: NormStats = None) -> "RunDirectory":
        self.checkpoints.mkdir(parents=True, exist_ok=True)
        (self.path / "config.yaml").write_text(cfg.to_yaml())
        (self.path / "seeds.json").write_text(json.dumps({"master": cfg.seed, **derive_seeds(cfg.seed)},
                                                         indent=2) + "\n")
        if norm_stats is not None:
            norm_stats.save(self.path / "norm_stats.json")
        return self

    def lock(self, timeout=0) -> FileLock:
        self.path.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path / ".lock"), timeout=timeout)


class RunDirectoryBusy(ConfigError):
    category = "busy"


def _locked(run: RunDirectory):
    lock = run.lock()
    try:
        lock.acquire()
    except Timeout:
        raise RunDirectoryBusy(f"run directory {run.path} is in use by another process") from None
    return lock


# ---------------------------------------------------------------------------
# training


def train(cfg: RunConfig, stage: str, resume=None, root=None) -> tuple[TrainState, RunDirectory]:
    """Run one stage inside the config's run directory, continuing from the previous stage when needed."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    configure_determinism(cfg.trainer.deterministic)
    run = RunDirectory.for_config(cfg, root)
    lock = _locked(run)
    try:
        if resume is not None:
            state = load_checkpoint(resume)
            splits, _ = load_splits(cfg, state.norm_stats)
        elif stage in PREVIOUS_STAGE:
            prev = run.checkpoint(PREVIOUS_STAGE[stage])
            if not prev.exists():
                raise FileNotFoundError(f"stage {stage!r} needs {prev}; run the {PREVIOUS_STAGE[stage]} stage first")
            state = load_checkpoint(prev)
            splits, _ = load_splits(cfg, state.norm_stats)
        else:
            splits, stats = load_splits(cfg)
            state = init_state(cfg, splits, stats)
        if state.config.digest != cfg.digest:
            # checkpoints carry their own config; the stage runs with the one given here
            state.config = cfg
        run.init(cfg, state.norm_stats)
        state = run_stage(state, splits, stage, run.path)
    finally:
        lock.release()
    return state, run


def run_stages(cfg: RunConfig, stages=("pretrain", "blend", "decoder"), run_dir=None):
    """In-memory multi-stage run; used by the toy pipeline and tests."""
    configure_determinism(cfg.trainer.deterministic)
    splits, stats = load_splits(cfg)
    state = init_state(cfg, splits, stats)
    digests = {}
    for stage in stages:
        if stage == "baseline":
            state = init_state(cfg, splits, stats)
        before = state.encoder_digest()
        state = run_stage(state, splits, stage, run_dir)
        digests[stage] = (before, state.encoder_digest())
    return state, splits, digests


# ---------------------------------------------------------------------------
# downstream heads


def _split_seed(cfg: RunConfig, name: str, offset=0) -> int:
    names = ("downstream_train", "downstream_val", "downstream_test", "test")
    return int(np.random.SeedSequence([derive_seeds(cfg.seed)["sampler"], names.index(name), offset])
               .generate_state(1)[0])


def _ctx(cfg: RunConfig, task, ckpt=None):
    return {"task": task, "config": cfg.digest[:12], "seed": cfg.seed, "checkpoint": str(ckpt) if ckpt else ""}


def forecast_task(cfg: RunConfig, backbone: ds.FrozenBackbone, splits: DatasetSplits, norm_stats, ckpt=None):
    f = cfg.downstream.forecast
    data = {name: ds.forecast_data(backbone, getattr(splits, name), f.mask_ratio, _split_seed(cfg, name))
            for name in ("downstream_train", "downstream_val", "downstream_test")}
    reports, heads = [], {}
    for lookback, interval in f.settings:
        setting = ds.ForecastSetting(lookback, interval)
        n_seeds = f.seeds if interval > 1 else 1
        per_seed = []
        for s in range(n_seeds):
            head, _ = ds.train_forecaster(backbone, data["downstream_train"], data["downstream_val"], setting, f,
                                          seed=derive_seeds(cfg.seed)["init"] + s)
            heads[(lookback, interval, s)] = head
            ctx = dict(_ctx(cfg, "forecast", ckpt), lookback=lookback, interval=interval)
            one = ds.one_step_scores(head, data["downstream_test"], setting)
            rows = [MetricReport(k, v, None, ctx) for k, v in one.items()]
            rows += ds.evaluate_rollout(head, backbone, data["downstream_test"], setting, f.rollout, f.horizons,
                                        norm_stats, f.max_windows, cfg.evaluation, _ctx(cfg, "forecast", ckpt))
            per_seed.append(rows)
        reports += _average_seeds(per_seed)
    return reports, heads


def _average_seeds(per_seed):
    """Mean and spread across seeds of reports that share name and context."""
    if len(per_seed) == 1:
        return per_seed[0]
    out = []
    for rows in zip(*per_seed):
        vals = np.array([r.value for r in rows])
        out.append(MetricReport(rows[0].name, float(vals.mean()), float(vals.std()),
                                dict(rows[0].context, seeds=len(rows))))
    return out


def diffusion_task(cfg: RunConfig, backbone: ds.FrozenBackbone, splits: DatasetSplits, ckpt=None):
    from .evaluation import diffusion_eval

    dcfg = cfg.downstream.diffusion
    data = {name: ds.diffusion_data(backbone, getattr(splits, name), dcfg.mask_ratio, _split_seed(cfg, name))
            for name in ("downstream_train", "downstream_val", "downstream_test")}
    model, history = ds.train_diffusion(backbone, data["downstream_train"], data["downstream_val"], dcfg,
                                        seed=derive_seeds(cfg.seed)["init"])
    test = data["downstream_test"]
    pick = np.linspace(0, len(test.clean) - 1, min(dcfg.eval_conditions, len(test.clean))).round().astype(int)
    pick = torch.from_numpy(pick)
    reports = diffusion_eval(model, test.condition[pick], test.clean, test.fields[pick], backbone, cfg.evaluation,
                             draws=dcfg.eval_batches, seed=derive_seeds(cfg.seed)["torch"],
                             context=_ctx(cfg, "diffusion", ckpt))
    reports.append(MetricReport("val_noise_mse", min(history) if history else float("nan"), None,
                                _ctx(cfg, "diffusion", ckpt)))
    return reports, model


def classify_task(cfg: RunConfig, backbone: ds.FrozenBackbone, splits: DatasetSplits, ckpt=None):
    c = cfg.downstream.classify
    data = {name: ds.classify_data(backbone, getattr(splits, name), splits.time_origin, c, _split_seed(cfg, name))
            for name in ("downstream_train", "downstream_val", "downstream_test")}
    head, _ = ds.train_classifier(backbone, data["downstream_train"], data["downstream_val"], c,
                                  seed=derive_seeds(cfg.seed)["init"])
    test = data["downstream_test"]
    ce = ds.season_cross_entropy(ds.classify(head, test.embeddings), test.labels)
    return [MetricReport("test_cross_entropy", ce, None, _ctx(cfg, "classify", ckpt))], head


def smoothness_task(cfg: RunConfig, backbone: ds.FrozenBackbone, splits: DatasetSplits, ckpt=None):
    n = min(cfg.evaluation.smoothness_batch, len(splits.test))
    h = backbone.embed(np.ascontiguousarray(splits.test.values[:n]))
    return smoothness_reports(h, _ctx(cfg, "smoothness", ckpt))


def reconstruction_task(cfg: RunConfig, backbone: ds.FrozenBackbone, splits: DatasetSplits, ckpt=None,
                        mask_ratio=0.7):
    test = splits.test
    x = torch.from_numpy(np.ascontiguousarray(test.values)).to(backbone.dtype)
    h = backbone.embed_split(test, mask_ratio, _split_seed(cfg, "test"))
    x_hat = backbone.decode(h)
    ctx = dict(_ctx(cfg, "reconstruction", ckpt), mask_ratio=mask_ratio)
    return [MetricReport(k, v, None, ctx) for k, v in field_metrics(x_hat, x, cfg.evaluation).items()]


def evaluate(cfg: RunConfig, task: str, ckpt, out_dir=None) -> list[MetricReport]:
    """Train (for head tasks) and score one task against a trained checkpoint; writes CSV and JSON."""
    if task not in EVAL_TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {EVAL_TASKS}")
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    configure_determinism(cfg.trainer.deterministic)
    state = load_checkpoint(ckpt)
    splits, stats = load_splits(cfg, state.norm_stats)
    backbone = ds.FrozenBackbone(state.model)
    if task == "forecast":
        reports = forecast_task(cfg, backbone, splits, stats, ckpt)[0]
    elif task == "diffusion":
        reports = diffusion_task(cfg, backbone, splits, ckpt)[0]
    elif task == "classify":
        reports = classify_task(cfg, backbone, splits, ckpt)[0]
    elif task == "smoothness":
        reports = smoothness_task(cfg, backbone, splits, ckpt)
    else:
        reports = reconstruction_task(cfg, backbone, splits, ckpt)
    backbone.assert_frozen()
    if out_dir is None:
        out_dir = RunDirectory.for_config(cfg).path / "reports"
    write_reports(reports, Path(out_dir) / f"{task}-{ckpt.stem}")
    return reports


# ---------------------------------------------------------------------------
# the toy end-to-end run


@dataclass
class PipelineResult:
    state: TrainState
    splits: DatasetSplits
    digests: dict
    reports: list

    def history(self, stage, split="train"):
        return [r for r in self.state.history if r["stage"] == stage and r["split"] == split]

    def report(self, name, **ctx):
        hits = [r for r in self.reports if r.name == name and all(r.context.get(k) == v for k, v in ctx.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} reports match {name} {ctx}")
        return hits[0]


def run_pipeline(cfg: RunConfig, run_dir=None, stages=("pretrain", "blend", "decoder"),
                 tasks=("forecast", "classify", "smoothness")) -> PipelineResult:
    """Train the stages in memory, then run the requested heads/metrics on the frozen result."""
    state, splits, digests = run_stages(cfg, stages, run_dir)
    backbone = ds.FrozenBackbone(state.model)
    reports = []
    for task in tasks:
        if task == "forecast":
            reports += forecast_task(cfg, backbone, splits, state.norm_stats)[0]
        elif task == "diffusion":
            reports += diffusion_task(cfg, backbone, splits)[0]
        elif task == "classify":
            reports += classify_task(cfg, backbone, splits)[0]
        elif task == "smoothness":
            reports += smoothness_task(cfg, backbone, splits)
        elif task == "reconstruction":
            reports += reconstruction_task(cfg, backbone, splits)
        else:
            raise ConfigError(f"unknown task {task!r}")
    backbone.assert_frozen()
    if run_dir is not None:
        write_reports(reports, Path(run_dir) / "reports")
    return PipelineResult(state, splits, digests, reports)
