"""Resampling of trajectories onto a fixed time step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .trajectory_io import Trajectory

# below this many knots a natural cubic spline is not worth fitting
MIN_SPLINE_POINTS = 4


@dataclass(frozen=True)
class ResampleSpec:
    interval: float = 5.0

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("resample interval must be positive")


def resample_times(t0: float, t_end: float, interval: float) -> np.ndarray:
    """t0, t0 + interval, ... up to the last value not exceeding t_end."""
    n = math.floor((t_end - t0) / interval)
    if t0 + (n + 1) * interval <= t_end:
        n += 1
    while n > 0 and t0 + n * interval > t_end:
        n -= 1
    return t0 + interval * np.arange(n + 1)


def resample(traj: Trajectory, spec: ResampleSpec = ResampleSpec()) -> Trajectory:
    """Interpolate lat and lng independently at a fixed time step.

    Uses a natural cubic spline over time (linear interpolation when there
    are fewer than four points).  No extrapolation past the last timestamp.
    """
    if len(traj) < 2:
        raise ValueError(f"trajectory {traj.id!r} is too short to resample")
    times = resample_times(float(traj.t[0]), float(traj.t[-1]), spec.interval)
    if len(traj) < MIN_SPLINE_POINTS:
        lat = np.interp(times, traj.t, traj.lat)
        lng = np.interp(times, traj.t, traj.lng)
    else:
        lat = CubicSpline(traj.t, traj.lat, bc_type="natural")(times)
        lng = CubicSpline(traj.t, traj.lng, bc_type="natural")(times)
    lat[0], lng[0] = traj.lat[0], traj.lng[0]
    # spline overshoot must not leave the valid coordinate range
    np.clip(lat, -90.0, 90.0, out=lat)
    np.clip(lng, -180.0, 180.0, out=lng)
    return Trajectory(traj.id, times, lat, lng)
