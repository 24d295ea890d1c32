"""Glue shared by the CLI, the benchmark and the tests: resample, clip, rasterize."""

from __future__ import annotations

from .preprocess import ResampleSpec, resample
from .raster import DEFAULT_EPSILON, GridSpec, TrajectoryImage, clip_to_grid, rasterize
from .trajectory_io import Trajectory


def resample_all(trajs, interval: float = 5.0) -> list[Trajectory]:
    spec = ResampleSpec(interval)
    return [resample(t, spec) for t in trajs]


def clip_all(trajs, grid: GridSpec) -> list[Trajectory]:
    """Drop points outside the grid; trajectories left with no points raise."""
    out = []
    for t in trajs:
        c = clip_to_grid(t, grid)
        if len(c) == 0:
            raise ValueError(f"trajectory {t.id!r} lies entirely outside the grid")
        out.append(c)
    return out


def images_for(trajs, grid: GridSpec, epsilon: int = DEFAULT_EPSILON) -> list[TrajectoryImage]:
    return [rasterize(t, grid, epsilon)[1] for t in trajs]
