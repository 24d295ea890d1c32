"""Projection of trajectories onto a regular lat/lng grid.

Cell indices are 1-based: latitude maps to the first image axis (``w``),
longitude to the second (``h``).  Binary images are zero-padded so both
sides are multiples of 16, which the four 2x2 poolings of the encoder need.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .trajectory_io import BoundingBox, TimestampedPoint, Trajectory

PAD_MULTIPLE = 16
DEFAULT_EPSILON = 3


def _round_up(n: int, m: int = PAD_MULTIPLE) -> int:
    return -(-n // m) * m


@dataclass(frozen=True)
class GridSpec:
    bbox: BoundingBox
    W: int
    H: int
    delta: float | None = None

    def __post_init__(self):
        if self.W < 2 or self.H < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.W}x{self.H}")

    @classmethod
    def from_delta(cls, bbox: BoundingBox, delta: float) -> GridSpec:
        if delta <= 0:
            raise ValueError("delta must be positive")
        # tolerance keeps e.g. 0.45 / 0.01 = 45.000000000000007 from rounding up to 46
        w = math.ceil((bbox.lat_max - bbox.lat_min) / delta - 1e-9)
        h = math.ceil((bbox.lng_max - bbox.lng_min) / delta - 1e-9)
        return cls(bbox, max(w, 2), max(h, 2), delta)

    @property
    def pad_W(self) -> int:
        return _round_up(self.W)

    @property
    def pad_H(self) -> int:
        return _round_up(self.H)

    @property
    def padded_shape(self) -> tuple[int, int]:
        return self.pad_W, self.pad_H


@dataclass(frozen=True)
class CountImage:
    grid: GridSpec
    counts: np.ndarray  # (W, H) int


@dataclass(frozen=True)
class TrajectoryImage:
    grid: GridSpec
    pixels: np.ndarray  # (pad_W, pad_H) in {0, 1}
    id: str = ""


def project(lat, lng, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised 1-based cell indices (w, h) for points inside ``grid.bbox``."""
    lat = np.asarray(lat, dtype=np.float64)
    lng = np.asarray(lng, dtype=np.float64)
    b = grid.bbox
    if not np.all(b.contains(lat, lng)):
        raise ValueError("out of grid: point outside the bounding box")
    w = np.ceil((lat - b.lat_min) / (b.lat_max - b.lat_min) * (grid.W - 1)).astype(np.int64) + 1
    h = np.ceil((lng - b.lng_min) / (b.lng_max - b.lng_min) * (grid.H - 1)).astype(np.int64) + 1
    return w, h


def project_point(p: TimestampedPoint, grid: GridSpec) -> tuple[int, int]:
    w, h = project(p.lat, p.lng, grid)
    return int(w), int(h)


def rasterize(traj: Trajectory, grid: GridSpec, epsilon: int = DEFAULT_EPSILON) -> tuple[CountImage, TrajectoryImage]:
    """Count points per cell, then keep cells visited more than ``epsilon`` times."""
    if len(traj) == 0:
        raise ValueError(f"cannot rasterize empty trajectory {traj.id!r}")
    w, h = project(traj.lat, traj.lng, grid)
    counts = np.zeros((grid.W, grid.H), dtype=np.int64)
    np.add.at(counts, (w - 1, h - 1), 1)
    pixels = np.zeros(grid.padded_shape, dtype=np.float64)
    pixels[: grid.W, : grid.H] = counts > epsilon
    return CountImage(grid, counts), TrajectoryImage(grid, pixels, traj.id)


def clip_to_grid(traj: Trajectory, grid: GridSpec) -> Trajectory:
    """Drop points outside the grid (e.g. spline overshoot near the boundary)."""
    keep = grid.bbox.contains(traj.lat, traj.lng)
    if keep.all():
        return traj
    return Trajectory(traj.id, traj.t[keep], traj.lat[keep], traj.lng[keep])


def stack_images(images) -> np.ndarray:
    """(M, 1, pad_W, pad_H) batch from a list of TrajectoryImage sharing one grid."""
    images = list(images)
    if not images:
        raise ValueError("no images")
    grid = images[0].grid
    if any(im.grid != grid for im in images):
        raise ValueError("images are on different grids")
    return np.stack([im.pixels for im in images])[:, None]


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255); values are clipped to [0, 1] and scaled."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    rows, cols = data.shape
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PGM")
    cols, rows, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end() : m.end() + rows * cols], dtype=np.uint8).reshape(rows, cols)
    return data.astype(np.float64) / maxval


def save_images(path, images) -> None:
    """Image set as .npz: uint8 pixels, ids and the grid definition."""
    images = list(images)
    batch = stack_images(images)[:, 0].astype(np.uint8)
    g = images[0].grid
    b = g.bbox
    np.savez_compressed(
        path,
        pixels=batch,
        ids=np.array([im.id for im in images]),
        bbox=np.array([b.lat_min, b.lat_max, b.lng_min, b.lng_max]),
        shape=np.array([g.W, g.H]),
        delta=np.array([np.nan if g.delta is None else g.delta]),
    )


def load_images(path) -> list[TrajectoryImage]:
    try:
        with np.load(path, allow_pickle=False) as z:
            pixels, ids, bbox, shape, delta = (z[k] for k in ("pixels", "ids", "bbox", "shape", "delta"))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: not an image set ({exc})") from exc
    d = float(delta[0])
    grid = GridSpec(BoundingBox(*(float(v) for v in bbox)), int(shape[0]), int(shape[1]), None if np.isnan(d) else d)
    if pixels.shape[1:] != grid.padded_shape:
        raise DataError(f"{path}: pixel array does not match the grid")
    return [TrajectoryImage(grid, p.astype(np.float64), str(i)) for p, i in zip(pixels, ids)]
