"""Dynamic time warping and discrete Frechet distance on planar point sequences.

Sequences are (n, 2) arrays; ground distance is Euclidean in whatever units
the coordinates use (degrees here).  Both recurrences keep a single rolling
row, so memory is O(len(b)).
"""

from __future__ import annotations

import os

import numpy as np
from numba import config as numba_config
from numba import njit, prange

# the bundled TBB is too old for numba; pick the portable layer unless the user chose one
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba_config.THREADING_LAYER = "workqueue"


def _as_seq(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point sequence, got shape {a.shape}")
    if len(a) == 0:
        raise ValueError("point sequence is empty")
    if not np.all(np.isfinite(a)):
        raise ValueError("point sequence contains non-finite values")
    return a


@njit(cache=True)
def _dtw(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    acc = 0.0
    for j in range(m):
        dx = a[0, 0] - b[j, 0]
        dy = a[0, 1] - b[j, 1]
        acc += np.sqrt(dx * dx + dy * dy)
        prev[j] = acc
    for i in range(1, n):
        dx = a[i, 0] - b[0, 0]
        dy = a[i, 1] - b[0, 1]
        cur[0] = prev[0] + np.sqrt(dx * dx + dy * dy)
        for j in range(1, m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + np.sqrt(dx * dx + dy * dy)
        prev, cur = cur, prev
    return prev[m - 1]


@njit(cache=True)
def _frechet(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    run = 0.0
    for j in range(m):
        dx = a[0, 0] - b[j, 0]
        dy = a[0, 1] - b[j, 1]
        d = np.sqrt(dx * dx + dy * dy)
        if d > run:
            run = d
        prev[j] = run
    for i in range(1, n):
        dx = a[i, 0] - b[0, 0]
        dy = a[i, 1] - b[0, 1]
        d = np.sqrt(dx * dx + dy * dy)
        cur[0] = prev[0] if prev[0] > d else d
        for j in range(1, m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            d = np.sqrt(dx * dx + dy * dy)
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best if best > d else d
        prev, cur = cur, prev
    return prev[m - 1]


def dtw(a, b) -> float:
    """Unconstrained DTW: minimum summed Euclidean cost over monotone warping paths."""
    return float(_dtw(_as_seq(a), _as_seq(b)))


def frechet_discrete(a, b) -> float:
    """Discrete Frechet distance (Eiter & Mannila coupling recurrence)."""
    return float(_frechet(_as_seq(a), _as_seq(b)))


@njit(cache=True, parallel=True)
def _pairwise(flat, offsets, use_frechet):
    n = offsets.shape[0] - 1
    out = np.zeros((n, n))
    for i in prange(n):
        a = flat[offsets[i] : offsets[i + 1]]
        for j in range(i + 1, n):
            b = flat[offsets[j] : offsets[j + 1]]
            out[i, j] = _frechet(a, b) if use_frechet else _dtw(a, b)
    return out


def pairwise(seqs, metric: str = "dtw") -> np.ndarray:
    """Symmetric (n, n) matrix of DTW or discrete Frechet distances.

    Only the upper triangle is computed; each cell is independent, so rows
    are spread over numba threads without affecting the result.
    """
    if metric not in ("dtw", "frechet"):
        raise ValueError(f"unknown metric {metric!r}")
    seqs = [_as_seq(s) for s in seqs]
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in seqs])
    flat = np.concatenate(seqs) if seqs else np.zeros((0, 2))
    upper = _pairwise(flat, offsets, metric == "frechet")
    return upper + upper.T
