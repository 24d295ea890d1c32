"""Trajectory data model and AIS-style CSV ingestion.

CSV layout: header ``id,t,lat,lng``; columns are read by position, extra
columns are ignored.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

CSV_HEADER = ("id", "t", "lat", "lng")


@dataclass(frozen=True)
class TimestampedPoint:
    lat: float
    lng: float
    t: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lng <= 180.0:
            raise ValueError(f"longitude out of range: {self.lng}")
        if not math.isfinite(self.t):
            raise ValueError("timestamp must be finite")


@dataclass(frozen=True)
class BoundingBox:
    lat_min: float
    lat_max: float
    lng_min: float
    lng_max: float

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lng_min < self.lng_max):
            raise ValueError(f"degenerate bounding box: {self}")

    def contains(self, lat, lng):
        """Closed-interval membership; works elementwise on arrays."""
        lat = np.asarray(lat)
        lng = np.asarray(lng)
        return (lat >= self.lat_min) & (lat <= self.lat_max) & (lng >= self.lng_min) & (lng <= self.lng_max)


class Trajectory:
    """One vessel track: parallel arrays of time (s), latitude and longitude (deg).

    Timestamps must be strictly increasing.
    """

    __slots__ = ("id", "t", "lat", "lng")

    def __init__(self, id: str, t, lat, lng):
        t = np.array(t, dtype=np.float64)
        lat = np.array(lat, dtype=np.float64)
        lng = np.array(lng, dtype=np.float64)
        if not (t.ndim == lat.ndim == lng.ndim == 1 and len(t) == len(lat) == len(lng)):
            raise ValueError("t, lat and lng must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(lat)) and np.all(np.isfinite(lng))):
            raise ValueError("trajectory contains non-finite values")
        if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lng) > 180.0):
            raise ValueError("coordinates out of WGS-84 range")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"timestamps of {id!r} are not strictly increasing")
        for arr in (t, lat, lng):
            arr.flags.writeable = False
        self.id = str(id)
        self.t, self.lat, self.lng = t, lat, lng

    @classmethod
    def from_points(cls, id: str, points) -> Trajectory:
        points = list(points)
        return cls(id, [p.t for p in points], [p.lat for p in points], [p.lng for p in points])

    @property
    def points(self) -> list[TimestampedPoint]:
        return [TimestampedPoint(float(a), float(b), float(c)) for a, b, c in zip(self.lat, self.lng, self.t)]

    def __len__(self):
        return len(self.t)

    def xy(self) -> np.ndarray:
        """(N, 2) planar coordinates, x = longitude, y = latitude."""
        return np.column_stack((self.lng, self.lat))

    def with_id(self, new_id: str) -> Trajectory:
        return Trajectory(new_id, self.t, self.lat, self.lng)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lng, other.lng)
        )

    def __repr__(self):
        return f"Trajectory(id={self.id!r}, n={len(self)})"


def _parse_row(row):
    if len(row) < 4:
        raise ValueError("too few columns")
    ident = row[0].strip()
    if not ident:
        raise ValueError("empty id")
    t, lat, lng = float(row[1]), float(row[2]), float(row[3])
    if not (math.isfinite(t) and math.isfinite(lat) and math.isfinite(lng)):
        raise ValueError("non-finite value")
    if abs(lat) > 90.0 or abs(lng) > 180.0:
        raise ValueError("coordinate out of range")
    return ident, t, lat, lng


def ingest_csv(path, bbox: BoundingBox | None = None, min_points: int = 2) -> list[Trajectory]:
    """Read AIS records and group them into one trajectory per id.

    Rows outside ``bbox`` are dropped, duplicate timestamps keep their first
    occurrence, points are sorted by time, and trajectories shorter than
    ``min_points`` are discarded.  Malformed rows are skipped and counted.
    Output order is the order in which ids first appear in the file.

    Raises:
        DataError: if the file cannot be read or no trajectory survives.
    """
    path = Path(path)
    groups: OrderedDict[str, list] = OrderedDict()
    bad = 0
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader, None)  # header
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    ident, t, lat, lng = _parse_row(row)
                except ValueError as exc:
                    bad += 1
                    log.debug("%s:%d skipped (%s)", path, lineno, exc)
                    continue
                rows = groups.setdefault(ident, [])
                if bbox is None or bbox.contains(lat, lng):
                    rows.append((t, lat, lng))
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if bad:
        log.warning("%s: skipped %d malformed row(s)", path, bad)

    out = []
    for ident, rows in groups.items():
        if not rows:
            continue
        arr = np.array(rows, dtype=np.float64)
        order = np.argsort(arr[:, 0], kind="stable")
        arr = arr[order]
        keep = np.ones(len(arr), dtype=bool)
        keep[1:] = np.diff(arr[:, 0]) != 0
        arr = arr[keep]
        if len(arr) < min_points:
            continue
        out.append(Trajectory(ident, arr[:, 0], arr[:, 1], arr[:, 2]))
    if not out:
        raise DataError(f"{path}: no trajectory with at least {min_points} points inside the bounding box")
    return out


def write_csv(path, trajectories) -> None:
    """Write trajectories in the ingestion layout; floats use ``repr`` so they round-trip exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for tr in trajectories:
            for t, lat, lng in zip(tr.t, tr.lat, tr.lng):
                w.writerow((tr.id, repr(float(t)), repr(float(lat)), repr(float(lng))))


def split_on_gap(traj: Trajectory, max_gap: float = 600.0) -> list[Trajectory]:
    """Cut ``traj`` wherever consecutive timestamps are more than ``max_gap`` seconds apart.

    Segments are named ``<id>_<k>`` (k counts kept segments from 0); segments
    with fewer than two points are dropped.
    """
    if max_gap <= 0:
        raise ValueError("max_gap must be positive")
    cuts = np.flatnonzero(np.diff(traj.t) > max_gap) + 1
    bounds = np.concatenate(([0], cuts, [len(traj)]))
    segments = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a < 2:
            continue
        segments.append(Trajectory(f"{traj.id}_{len(segments)}", traj.t[a:b], traj.lat[a:b], traj.lng[a:b]))
    return segments
