"""Pairwise trajectory distance matrices under CAE embeddings, DTW or discrete Frechet."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline_metrics
from .cae import CaeModel, Embedding, encode_batch
from .errors import DataError
from .raster import DEFAULT_EPSILON, rasterize

METRICS = ("cae", "dtw", "frechet")


@dataclass
class DistanceMatrix:
    values: np.ndarray
    ids: list[str] = field(default_factory=list)
    metric: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.values.shape[0]
        if self.values.shape != (n, n):
            raise ValueError("distance matrix must be square")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise ValueError("one id per row required")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def check(self, tol: float = 1e-12) -> None:
        """Raise ValueError unless the matrix is symmetric, non-negative, zero on the diagonal."""
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValueError("distance matrix has non-finite entries")
        if np.max(np.abs(v - v.T), initial=0.0) > tol:
            raise ValueError("distance matrix is not symmetric")
        if np.any(v < 0):
            raise ValueError("distance matrix has negative entries")
        if np.any(np.diag(v) != 0):
            raise ValueError("distance matrix has a non-zero diagonal")

    def to_csv(self, path) -> None:
        """Header row of ids, then one row of 12-significant-digit distances per id."""
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(",".join(self.ids) + "\n")
            for row in self.values:
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, metric: str = "") -> DistanceMatrix:
        try:
            lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if not lines:
            raise DataError(f"{path}: empty matrix file")
        ids = lines[0].split(",")
        try:
            values = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if values.shape != (len(ids), len(ids)):
            raise DataError(f"{path}: expected a {len(ids)}x{len(ids)} matrix")
        return cls(values, ids, metric)


def euclid_embed(e1: Embedding | np.ndarray, e2: Embedding | np.ndarray) -> float:
    a = e1.values if isinstance(e1, Embedding) else np.asarray(e1, dtype=np.float64)
    b = e2.values if isinstance(e2, Embedding) else np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimensions differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sqrt(np.dot(d, d)))


def embedding_distances(values: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows; upper triangle computed once and mirrored."""
    y = np.asarray(values, dtype=np.float64)
    n = len(y)
    out = np.zeros((n, n))
    for i in range(n - 1):
        d = y[i + 1 :] - y[i]
        out[i, i + 1 :] = np.sqrt(np.einsum("ij,ij->i", d, d))
    return out + out.T


def build_matrix(
    trajs,
    metric: str,
    model: CaeModel | None = None,
    epsilon: int = DEFAULT_EPSILON,
) -> DistanceMatrix:
    """Distance matrix over ``trajs``.

    For ``metric='cae'`` each trajectory is rasterized on the model grid and
    encoded exactly once; the matrix then holds embedding distances.  DTW
    and Frechet run on (lng, lat) point sequences.
    """
    trajs = list(trajs)
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if len(trajs) < 2:
        raise ValueError("need at least two trajectories")
    ids = [t.id for t in trajs]
    if metric == "cae":
        if model is None:
            raise ValueError("metric 'cae' needs a trained model")
        images = [rasterize(t, model.grid, epsilon)[1] for t in trajs]
        values = embedding_distances(encode_batch(model, images))
    else:
        values = baseline_metrics.pairwise([t.xy() for t in trajs], metric)
    return DistanceMatrix(values, ids, metric)


def from_embeddings(ids, values: np.ndarray) -> DistanceMatrix:
    return DistanceMatrix(embedding_distances(values), list(ids), "cae")
