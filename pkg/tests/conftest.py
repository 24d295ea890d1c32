"""Shared synthetic data and trained models; the expensive ones are built once per session."""

import time
from dataclasses import dataclass

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from trajsim import cae, pipeline, synth_bench
from trajsim.raster import GridSpec

# the 3-lane evaluation set: 60 trajectories on a 60x45 grid (64x48 padded)
LANE_SET_SEED = 0
TRAIN_CONFIG = cae.CaeConfig(L=3, batch_size=20, epochs=500, lr=0.001, seed=0)


def scenario_grid():
    return GridSpec.from_delta(synth_bench.SCENARIO_BBOX, synth_bench.SCENARIO_DELTA)


def lane_dataset(lanes, per_lane, seed):
    grid = scenario_grid()
    raw, labels = synth_bench.generate(synth_bench.scenario(lanes, per_lane, seed))
    trajs = pipeline.clip_all(pipeline.resample_all(raw), grid)
    return trajs, labels, pipeline.images_for(trajs, grid)


@pytest.fixture(scope="session")
def grid():
    return scenario_grid()


@pytest.fixture(scope="session")
def three_lanes():
    return lane_dataset(3, 20, LANE_SET_SEED)


@dataclass
class Trained:
    result: cae.TrainResult
    seconds: float


@pytest.fixture(scope="session")
def trained_three_lanes(three_lanes):
    """Single-threaded training run on the 3-lane images, with its wall time."""
    _, _, images = three_lanes
    start = time.perf_counter()
    with threadpool_limits(1):
        result = cae.train(images, TRAIN_CONFIG)
    return Trained(result, time.perf_counter() - start)


@pytest.fixture(scope="session")
def bench_set(grid):
    """500 trajectories in a seeded random order, so every prefix mixes all three lanes."""
    raw, _ = synth_bench.generate(synth_bench.scenario(3, 167, seed=1))
    order = np.random.default_rng(0).permutation(len(raw))[:500]
    return pipeline.clip_all(pipeline.resample_all([raw[i] for i in order]), grid)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if getattr(rep, "when", None) == "call" and "criterion" in props:
                lines.append((props["criterion"], outcome.upper()[:4], props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {detail}")
