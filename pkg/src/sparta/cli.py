"""Command-line entry point: prepare-data, train, downstream, evaluate, plot."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, parse_config
from .errors import SpartaError


def _config(path) -> RunConfig:
    return parse_config(path) if path else RunConfig()


def cmd_prepare_data(args):
    cfg = _config(args.config)
    if args.weatherbench:
        from .data import convert_weatherbench

        out = convert_weatherbench(args.weatherbench, args.out, cfg.data.channels)
    else:
        from .pipeline import prepare_data

        out = prepare_data(cfg, args.out)
    print(out)


def cmd_train(args):
    from .pipeline import train

    state, run = train(_config(args.config), args.stage, resume=args.resume, root=args.run_root)
    print(run.checkpoint(args.stage))


def cmd_evaluate(args):
    from .pipeline import evaluate

    reports = evaluate(_config(args.config), args.task, args.ckpt, args.out)
    for r in reports:
        std = "" if r.std is None else f" +- {r.std:.6g}"
        extra = " ".join(f"{k}={v}" for k, v in r.context.items() if k in ("model", "horizon", "units",
                                                                              "lookback", "interval"))
        print(f"{r.name} {r.value:.6g}{std} {extra}".rstrip())


def cmd_plot(args):
    import numpy as np

    from .downstream import FrozenBackbone
    from .evaluation import latent_projection_plot
    from .pipeline import load_splits
    from .trainer import load_checkpoint

    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    state = load_checkpoint(ckpt)
    splits, _ = load_splits(_config(args.config), state.norm_stats)
    split = getattr(splits, args.split)
    h = FrozenBackbone(state.model).embed(np.ascontiguousarray(split.values[:args.count]))
    out = latent_projection_plot(h.numpy(), args.out, args.method, args.window, args.interval, seed=args.seed)
    print(out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparta", description="Temporal contrastive weather embeddings.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", help="write a synthetic series or convert WeatherBench netCDF")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--weatherbench", help="directory of per-variable netCDF folders")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", required=True, choices=["pretrain", "blend", "decoder", "baseline"])
    s.add_argument("--config")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--run-root", help="override the run root directory")
    s.set_defaults(func=cmd_train)

    for name, tasks in (("downstream", ["forecast", "diffusion", "classify"]),
                        ("evaluate", ["forecast", "diffusion", "classify", "smoothness", "reconstruction"])):
        s = sub.add_parser(name, help="train and score a frozen-backbone head" if name == "downstream"
                           else "compute metrics for a checkpoint")
        s.add_argument("--task", required=True, choices=tasks)
        s.add_argument("--ckpt", required=True)
        s.add_argument("--config")
        s.add_argument("--out", help="report directory (default: <run dir>/reports)")
        s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="latent trajectory projection")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=["pca", "tsne"], default="pca")
    s.add_argument("--split", default="test", choices=["train", "val", "test", "downstream_train",
                                                         "downstream_val", "downstream_test"])
    s.add_argument("--count", type=int, default=256)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--interval", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_plot)
    return p


def _category(err: BaseException) -> str:
    if isinstance(err, SpartaError):
        return err.category
    if isinstance(err, (FileNotFoundError, PermissionError, IsADirectoryError, OSError)):
        return "io"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as err:  # one machine-parsable line, then a nonzero exit
        message = " ".join(str(err).split())
        print(f"error: category={_category(err)} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
