import math
import time

import numpy as np
import pytest
import torch

from sparta import toy_config
from sparta.trainer import configure_determinism

TOY_SEEDS = (0, 1, 2)

configure_determinism(True)


def micro_config(seed=0, **overrides):
    """A few tiny batches per stage; for plumbing tests rather than trends."""
    stage = {"epochs": 2, "lr": 1e-3, "batch_size": 8, "max_batches_per_epoch": 2}
    base = {
        "trainer": {"pretrain": stage, "blend": stage, "decoder": stage, "baseline": stage, "val_max_batches": 1},
    }
    for k, v in overrides.items():
        base[k] = {**base.get(k, {}), **v}
    return toy_config(seed, **base)


@pytest.fixture
def micro_cfg():
    return micro_config()


class ToyRuns:
    """Full toy runs shared by the acceptance and trend tests; built on first use."""

    def __init__(self, root):
        from sparta.pipeline import run_pipeline

        self.root = root
        self.sparta, self.ablation, self.timings = {}, {}, {}
        start = time.perf_counter()
        for seed in TOY_SEEDS:
            t0 = time.perf_counter()
            tasks = ("forecast", "classify", "smoothness") + (("diffusion",) if seed == TOY_SEEDS[0] else ())
            self.sparta[seed] = run_pipeline(toy_config(seed), run_dir=root / f"sparta-{seed}", tasks=tasks)
            self.ablation[seed] = run_pipeline(toy_config(seed, losses={"cycle": False}),
                                               run_dir=root / f"nocycle-{seed}", stages=("pretrain", "blend"),
                                               tasks=("smoothness",))
            self.timings[seed] = time.perf_counter() - t0
        self.total_seconds = time.perf_counter() - start

    def replay(self, seed=TOY_SEEDS[0]):
        from sparta.pipeline import run_pipeline

        tasks = ("forecast", "classify", "smoothness") + (("diffusion",) if seed == TOY_SEEDS[0] else ())
        return run_pipeline(toy_config(seed), run_dir=self.root / f"replay-{seed}", tasks=tasks)


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    return ToyRuns(tmp_path_factory.mktemp("toy"))


def rng(seed=0):
    return np.random.default_rng(seed)


LN4 = math.log(4)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(mod.RESULTS):
            terminalreporter.write_line(mod.RESULTS[n])
