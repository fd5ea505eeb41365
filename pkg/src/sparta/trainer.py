"""Four-stage training: contrastive pretraining, decoder blending, decoder fine-tuning.

The autoencoder baseline reuses the same sampler and masking, with an MSE-only objective.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import DatasetSplits, NormStats, augment_batch, mask_batch
from .errors import DataError, InvariantViolation, TrainingDiverged
from .losses import (BlendSchedule, LossBreakdown, alpha_at_epoch, cycle_penalty, recon_mse, stage2_total,
                     temporal_contrastive)
from .networks import SpartaModel, build_model, parameter_digest, set_requires_grad
from .sampler import MASK_HIGH, MASK_LOW, SEED_HIGH, BatchPlan, anchor_pool, epoch_plans

log = logging.getLogger(__name__)

STAGES = ("pretrain", "blend", "decoder", "baseline")
CHECKPOINT_FORMAT = "sparta-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "stage", "split", "alpha", "contrastive", "cycle", "recon", "recon_views", "total", "lr")


def derive_seeds(master_seed: int) -> dict[str, int]:
    """Fan one master seed out to independent streams."""
    children = np.random.SeedSequence(master_seed).spawn(4)
    names = ("data", "init", "sampler", "torch")
    return {k: int(c.generate_state(1)[0]) for k, c in zip(names, children)}


def configure_determinism(enabled=True):
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# per-batch objectives


@dataclass
class ViewBatch:
    """Model-ready tensors for one batch.

    views stacks anchors, masked minus views, masked plus views and, optionally,
    hard and soft negatives, n rows each. view_targets are the unmasked minus and
    plus views (2n rows); recon_inputs/recon_targets are masked and complete
    non-augmented samples.
    """

    n: int
    views: Optional[torch.Tensor] = None
    view_targets: Optional[torch.Tensor] = None
    recon_inputs: Optional[torch.Tensor] = None
    recon_targets: Optional[torch.Tensor] = None


def _pair_indices(n):
    a = torch.arange(n)
    return a, torch.stack([a + n, a + 2 * n], dim=1)


def contrastive_terms(model: SpartaModel, batch: ViewBatch, tau: float, use_cycle: bool):
    n = batch.n
    h = model.encode(batch.views)
    z = F.normalize(model.project(h), dim=1)
    anchors, positives = _pair_indices(n)
    lc = temporal_contrastive(z, anchors, positives, tau)
    cyc = cycle_penalty(h[n:2 * n], h[:n], h[2 * n:3 * n]) if use_cycle else lc.new_zeros(())
    return h, lc, cyc


def pretrain_objective(model, batch, tau=0.3, use_cycle=True):
    _, lc, cyc = contrastive_terms(model, batch, tau, use_cycle)
    total = lc + cyc
    return total, LossBreakdown(lc.item(), cyc.item(), 0.0, total.item(), 1.0)


def blend_objective(model, batch, alpha, tau=0.3, use_cycle=True):
    n = batch.n
    h, lc, cyc = contrastive_terms(model, batch, tau, use_cycle)
    recon_views = (recon_mse(model.decode(h[n:2 * n]), batch.view_targets[:n])
                   + recon_mse(model.decode(h[2 * n:3 * n]), batch.view_targets[n:]))
    recon_anchor = recon_mse(model.decode(model.encode(batch.recon_inputs)), batch.recon_targets)
    return stage2_total(lc, cyc, recon_views, recon_anchor, alpha)


def reconstruction_objective(model, batch, frozen_encoder=False):
    if frozen_encoder:
        with torch.no_grad():
            h = model.encode(batch.recon_inputs)
    else:
        h = model.encode(batch.recon_inputs)
    loss = recon_mse(model.decode(h), batch.recon_targets)
    return loss, LossBreakdown(0.0, 0.0, loss.item(), loss.item(), 0.0)


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    config: RunConfig
    model: SpartaModel
    norm_stats: NormStats
    seeds: dict
    rng: np.random.Generator
    stage: Optional[str] = None
    epoch: int = 0
    completed: tuple = ()
    optimizer: Optional[torch.optim.Optimizer] = None
    scheduler: Optional[object] = None
    best_val: float = math.inf
    history: list = field(default_factory=list)

    def encoder_digest(self):
        return parameter_digest(*self.model.backbone_modules())


def init_state(cfg: RunConfig, splits: DatasetSplits, norm_stats: NormStats, dtype=torch.float32) -> TrainState:
    seeds = derive_seeds(cfg.seed)
    model = build_model(cfg.networks, splits.channels, splits.train.grid, seed=seeds["init"], dtype=dtype)
    return TrainState(cfg, model, norm_stats, seeds, np.random.default_rng(seeds["sampler"]))


def _stage_params(model: SpartaModel, stage: str):
    if stage == "pretrain":
        return list(model.encoder.parameters()) + list(model.projector.parameters())
    if stage == "blend":
        return list(model.parameters())
    if stage == "decoder":
        return list(model.decoder.parameters())
    return list(model.encoder.parameters()) + list(model.decoder.parameters())


def _new_optimizer(state: TrainState, stage: str):
    cfg = state.config
    stage_cfg = getattr(cfg.trainer, stage)
    opt = torch.optim.Adam(_stage_params(state.model, stage), lr=stage_cfg.lr)
    # patience - 1: torch reduces once the bad-epoch count exceeds patience
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.trainer.scheduler_factor, patience=cfg.trainer.scheduler_patience - 1,
        threshold=0.0)
    return opt, sched


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.canonical(),
        "channels": list(state.model.channels),
        "grid": list(state.model.grid),
        "dtype": str(next(state.model.parameters()).dtype),
        "norm_stats": state.norm_stats.to_dict(),
        "norm_stats_digest": state.norm_stats.digest(),
        "seeds": state.seeds,
        "stage": state.stage,
        "epoch": state.epoch,
        "completed": list(state.completed),
        "best_val": state.best_val,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict() if state.optimizer else None,
        "scheduler": state.scheduler.state_dict() if state.scheduler else None,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    from .config import config_from_dict

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cfg = config_from_dict(json.loads(payload["config"]))
    dtype = getattr(torch, payload["dtype"].split(".")[-1])
    model = build_model(cfg.networks, payload["channels"], payload["grid"], dtype=dtype)
    model.load_state_dict(payload["model"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng"]
    state = TrainState(cfg, model, NormStats.from_dict(payload["norm_stats"]), payload["seeds"], rng,
                       payload["stage"], payload["epoch"], tuple(payload["completed"]),
                       best_val=payload["best_val"], history=list(payload["history"]))
    if payload["optimizer"] is not None:
        state.optimizer, state.scheduler = _new_optimizer(state, state.stage)
        state.optimizer.load_state_dict(payload["optimizer"])
        state.scheduler.load_state_dict(payload["scheduler"])
    return state


# ---------------------------------------------------------------------------
# metrics log


class MetricsLog:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def append(self, row: dict):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row.get(k, "")) for k in METRIC_FIELDS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# ---------------------------------------------------------------------------
# the stage loop


class _StageRunner:
    def __init__(self, state: TrainState, splits: DatasetSplits, stage: str, run_dir=None):
        self.state = state
        self.cfg = state.config
        self.stage = stage
        self.stage_cfg = getattr(self.cfg.trainer, stage)
        self.run_dir = Path(run_dir) if run_dir else None
        self.log = MetricsLog(self.run_dir / "metrics.csv" if self.run_dir else None)
        dtype = next(state.model.parameters()).dtype
        self.train_x = torch.from_numpy(np.ascontiguousarray(splits.train.values)).to(dtype)
        self.val_x = torch.from_numpy(np.ascontiguousarray(splits.val.values)).to(dtype)
        self.hard_negatives = self.cfg.sampler.hard_negatives
        self.train_pool = anchor_pool(len(self.train_x), self.hard_negatives)
        self.val_pool = anchor_pool(len(self.val_x), self.hard_negatives)
        self.schedule = BlendSchedule(self.cfg.losses.alpha_start, self.cfg.losses.k)

    # -- batches ----------------------------------------------------------

    def make_batch(self, x, plan: BatchPlan, rng: np.random.Generator) -> ViewBatch:
        n = plan.batch_size
        batch = ViewBatch(n)
        with torch.no_grad():
            if self.stage in ("pretrain", "blend"):
                idx = torch.from_numpy(plan.view_indices())
                n_views = len(idx) // n
                seeds = plan.aug_seeds[:, :n_views].T.reshape(-1)
                aug = augment_batch(x[idx], seeds)
                views = aug.clone()
                views[n:2 * n] = mask_batch(aug[n:2 * n], plan.ratio_minus, plan.mask_seeds[:, 0])
                views[2 * n:3 * n] = mask_batch(aug[2 * n:3 * n], plan.ratio_plus, plan.mask_seeds[:, 1])
                batch.views = views
                batch.view_targets = aug[n:3 * n]
            if self.stage != "pretrain":
                if self.stage == "baseline":
                    idx = torch.from_numpy(plan.view_indices())
                else:
                    idx = torch.from_numpy(plan.anchor)
                ratios = rng.uniform(MASK_LOW, MASK_HIGH, size=len(idx))
                mseeds = rng.integers(0, SEED_HIGH, size=len(idx))
                targets = x[idx]
                batch.recon_inputs = mask_batch(targets, ratios, mseeds)
                batch.recon_targets = targets
        return batch

    def objective(self, batch: ViewBatch, epoch: int):
        model, losses = self.state.model, self.cfg.losses
        if self.stage == "pretrain":
            return pretrain_objective(model, batch, losses.tau, losses.cycle)
        if self.stage == "blend":
            return blend_objective(model, batch, alpha_at_epoch(self.schedule, epoch), losses.tau, losses.cycle)
        return reconstruction_objective(model, batch, frozen_encoder=self.stage == "decoder")

    # -- modes --------------------------------------------------------------

    def set_mode(self, training: bool):
        model = self.state.model
        model.train(training)
        if self.stage == "decoder":
            model.encoder.eval()
            model.projector.eval()

    def validate(self, epoch: int) -> LossBreakdown:
        self.set_mode(False)
        stage_idx = STAGES.index(self.stage)
        rng = np.random.default_rng([self.state.seeds["sampler"], stage_idx, 1])
        bs = min(self.stage_cfg.batch_size, len(self.val_pool))
        parts = []
        with torch.no_grad():
            for plan in epoch_plans(self.val_pool, bs, rng, len(self.val_x), self.hard_negatives,
                                    self.cfg.trainer.val_max_batches):
                _, p = self.objective(self.make_batch(self.val_x, plan, rng), epoch)
                parts.append(p)
        return _mean_parts(parts)

    # -- loop ---------------------------------------------------------------

    def run(self):
        state = self.state
        total_epochs = self.stage_cfg.epochs
        frozen_digest = state.encoder_digest() if self.stage == "decoder" else None
        if self.stage == "decoder":
            set_requires_grad(state.model.backbone_modules(), False)
        try:
            while state.epoch < total_epochs:
                self._epoch(state.epoch)
                state.epoch += 1
                self._checkpoint("last")
        finally:
            if self.stage == "decoder":
                set_requires_grad(state.model.backbone_modules(), True)
        if frozen_digest is not None and state.encoder_digest() != frozen_digest:
            raise InvariantViolation("encoder parameters changed while frozen")
        state.completed = tuple(dict.fromkeys(state.completed + (self.stage,)))
        self._checkpoint("final")
        return state

    def _epoch(self, epoch):
        state = self.state
        self.set_mode(True)
        params = [p for g in state.optimizer.param_groups for p in g["params"]]
        parts = []
        plans = epoch_plans(self.train_pool, self.stage_cfg.batch_size, state.rng, len(self.train_x),
                            self.hard_negatives, self.stage_cfg.max_batches_per_epoch)
        for step, plan in enumerate(plans):
            batch = self.make_batch(self.train_x, plan, state.rng)
            loss, p = self.objective(batch, epoch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite {self.stage} loss at epoch {epoch}, step {step}",
                                       self._dump_plan(plan, epoch, step))
            state.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if self.cfg.trainer.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, self.cfg.trainer.grad_clip)
            state.optimizer.step()
            parts.append(p)
        train = _mean_parts(parts)
        val = self.validate(epoch)
        lr = state.optimizer.param_groups[0]["lr"]
        state.scheduler.step(val.total)
        for split, p in (("train", train), ("val", val)):
            row = {"step": epoch, "stage": self.stage, "split": split, "lr": lr, **p.__dict__}
            state.history.append(row)
            self.log.append(row)
        log.info("%s epoch %d train %.5f val %.5f", self.stage, epoch, train.total, val.total)
        if val.total < state.best_val:
            state.best_val = val.total
            self._checkpoint("best")

    def _checkpoint(self, tag):
        if self.run_dir:
            save_checkpoint(self.state, self.run_dir / "checkpoints" / f"{self.stage}-{tag}.pt")

    def _dump_plan(self, plan, epoch, step):
        if not self.run_dir:
            return None
        path = self.run_dir / f"diverged-{self.stage}-e{epoch}-s{step}.json"
        path.write_text(json.dumps(plan.to_dict()))
        return path


def _mean_parts(parts) -> LossBreakdown:
    if not parts:
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    keys = LossBreakdown.__dataclass_fields__
    return LossBreakdown(**{k: float(np.mean([getattr(p, k) for p in parts])) for k in keys})


def _enter_stage(state: TrainState, stage: str):
    """Start a fresh stage unless the state is mid-way through this same stage."""
    if state.stage != stage or state.optimizer is None:
        state.stage = stage
        state.epoch = 0
        state.best_val = math.inf
        state.optimizer, state.scheduler = _new_optimizer(state, stage)


def run_stage(state: TrainState, splits: DatasetSplits, stage: str, run_dir=None) -> TrainState:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    _enter_stage(state, stage)
    return _StageRunner(state, splits, stage, run_dir).run()


def run_stage1(splits, cfg, norm_stats, state=None, run_dir=None):
    state = state or init_state(cfg, splits, norm_stats)
    return run_stage(state, splits, "pretrain", run_dir)


def run_stage2(state, splits, run_dir=None):
    return run_stage(state, splits, "blend", run_dir)


def run_stage3(state, splits, run_dir=None):
    return run_stage(state, splits, "decoder", run_dir)


def train_autoencoder_baseline(splits, cfg, norm_stats, state=None, run_dir=None):
    state = state or init_state(cfg, splits, norm_stats)
    return run_stage(state, splits, "baseline", run_dir)


def stage_validation(state: TrainState, splits: DatasetSplits, stage: str, epoch: int = 0) -> LossBreakdown:
    """The stage objective on the validation split, with the current parameters."""
    return _StageRunner(state, splits, stage).validate(epoch)
