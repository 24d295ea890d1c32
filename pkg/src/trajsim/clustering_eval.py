"""Agglomerative clustering over a distance matrix and cluster-quality scores."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cae import Embedding
from .similarity import DistanceMatrix, embedding_distances

LINKAGES = ("average", "complete", "single")


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge list in the usual convention: leaves are 0..n-1, merge k creates cluster n+k."""

    n: int
    merges: tuple[Merge, ...]
    linkage: str = "average"

    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])

    def to_linkage(self) -> np.ndarray:
        """(n-1, 4) array laid out like scipy's linkage matrix."""
        return np.array([[m.a, m.b, m.height, m.size] for m in self.merges], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    Z: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) == 0:
            raise ValueError("labels must be a non-empty 1-d sequence")
        if self.Z < 1 or set(np.unique(labels).tolist()) != set(range(1, self.Z + 1)):
            raise ValueError("labels must cover exactly 1..Z with no empty cluster")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_labels(cls, labels) -> ClusterAssignment:
        """Relabel arbitrary hashable labels to 1..Z in first-appearance order."""
        mapping: dict = {}
        out = [mapping.setdefault(lab, len(mapping) + 1) for lab in labels]
        return cls(np.array(out), len(mapping))

    def members(self, z: int) -> np.ndarray:
        return np.flatnonzero(self.labels == z)

    def __len__(self) -> int:
        return len(self.labels)


def _values(matrix) -> np.ndarray:
    return matrix.values if isinstance(matrix, DistanceMatrix) else np.asarray(matrix, dtype=np.float64)


def _validate(d: np.ndarray) -> None:
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if n < 2:
        raise ValueError("clustering needs at least two items")
    if not np.all(np.isfinite(d)):
        raise ValueError("distance matrix has non-finite entries")
    if np.max(np.abs(d - d.T)) > 1e-12 * max(1.0, float(np.max(np.abs(d)))):
        raise ValueError("distance matrix is not symmetric")
    if np.any(d < 0):
        raise ValueError("distance matrix has negative entries")


def hca(matrix, linkage: str = "average") -> Dendrogram:
    """Nearest-pair agglomeration with Lance-Williams updates.

    Each step merges the active pair (i, j), i < j, with the smallest
    linkage distance; ties go to the lexicographically lowest pair of slot
    indices.  The merged cluster takes slot i.  O(n^3) time, O(n^2) memory.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    d = _values(matrix).copy()
    _validate(d)
    n = d.shape[0]
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, np.inf)
    size = np.ones(n, dtype=np.int64)
    node = np.arange(n)
    active = np.ones(n, dtype=bool)
    merges = []
    for k in range(n - 1):
        # row-major argmin on a symmetric matrix lands on the lowest (i, j) with i < j
        flat = int(np.argmin(d))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        h = float(d[i, j])
        a, b = sorted((int(node[i]), int(node[j])))
        merges.append(Merge(a, b, h, int(size[i] + size[j])))
        di, dj = d[i], d[j]
        if linkage == "average":
            new = (size[i] * di + size[j] * dj) / (size[i] + size[j])
        elif linkage == "complete":
            new = np.maximum(di, dj)
        else:
            new = np.minimum(di, dj)
        new[~active] = np.inf
        new[i] = np.inf
        new[j] = np.inf
        d[i, :] = new
        d[:, i] = new
        d[j, :] = np.inf
        d[:, j] = np.inf
        active[j] = False
        size[i] += size[j]
        node[i] = n + k
    return Dendrogram(n, tuple(merges), linkage)


def cut(dendro: Dendrogram, Z: int) -> ClusterAssignment:
    """Undo the last Z-1 merges; components are numbered by first appearance."""
    n = dendro.n
    if not 1 <= Z <= n:
        raise ValueError(f"Z must lie in [1, {n}], got {Z}")
    parent = list(range(2 * n - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, m in enumerate(dendro.merges[: n - Z]):
        parent[find(m.a)] = n + k
        parent[find(m.b)] = n + k
    return ClusterAssignment.from_labels(find(i) for i in range(n))


def exemplar(members, matrix) -> int:
    """Member with the smallest summed distance to the other members; ties to the lowest index."""
    idx = np.unique(np.asarray(list(members), dtype=np.int64))
    if len(idx) == 0:
        raise ValueError("exemplar of an empty set")
    d = _values(matrix)
    sums = d[np.ix_(idx, idx)].sum(axis=1)
    return int(idx[int(np.argmin(sums))])


def _embedding_array(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.asarray(embeddings, dtype=np.float64)
    return np.array([e.values if isinstance(e, Embedding) else e for e in embeddings], dtype=np.float64)


@dataclass(frozen=True)
class Quality:
    BC: float
    WC: float
    AC: float


def bc_wc_ac(assignment: ClusterAssignment, embeddings, distances: np.ndarray | None = None) -> Quality:
    """Between-like, within-like and combined criteria in embedding space.

    Cluster and global means are approximated by exemplars.  AC is WC / (BC + WC),
    taken as 1 when both terms vanish.
    """
    if distances is None:
        y = _embedding_array(embeddings)
        if len(y) != len(assignment):
            raise ValueError("one embedding per trajectory required")
        distances = embedding_distances(y)
    elif distances.shape[0] != len(assignment):
        raise ValueError("one embedding per trajectory required")
    g = exemplar(range(len(assignment)), distances)
    bc = wc = 0.0
    for z in range(1, assignment.Z + 1):
        members = assignment.members(z)
        if len(members) == 0:
            raise ValueError(f"cluster {z} is empty")
        ex = exemplar(members, distances)
        bc += float(distances[g, ex])
        wc += float(distances[ex, members].mean())
    ac = 1.0 if bc + wc == 0 else wc / (bc + wc)
    return Quality(bc, wc, ac)


def sweep_ac(dendro: Dendrogram, embeddings, zmin: int = 2, zmax: int = 25) -> list[tuple[int, Quality]]:
    if zmin < 1 or zmax < zmin:
        raise ValueError("need 1 <= zmin <= zmax")
    if zmax > dendro.n:
        raise ValueError(f"zmax {zmax} exceeds the number of trajectories {dendro.n}")
    y = _embedding_array(embeddings)
    distances = embedding_distances(y)
    return [(z, bc_wc_ac(cut(dendro, z), y, distances)) for z in range(zmin, zmax + 1)]


def rand_index(assignment, truth) -> float:
    """Fraction of item pairs on which two partitions agree, via the contingency table."""
    a = np.asarray(assignment.labels if isinstance(assignment, ClusterAssignment) else assignment)
    b = np.asarray(truth.labels if isinstance(truth, ClusterAssignment) else truth)
    if a.shape != b.shape:
        raise ValueError("assignments differ in length")
    n = len(a)
    if n < 2:
        return 1.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def pairs(x):
        return int((x * (x - 1) // 2).sum())

    total = n * (n - 1) // 2
    both = pairs(table)
    agree = total - pairs(table.sum(axis=1)) - pairs(table.sum(axis=0)) + 2 * both
    return agree / total


def write_assignment_csv(path, ids, assignment: ClusterAssignment) -> None:
    if len(ids) != len(assignment):
        raise ValueError("one id per label required")
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("id,cluster\n")
        for i, lab in zip(ids, assignment.labels):
            fh.write(f"{i},{int(lab)}\n")


def read_assignment_csv(path) -> tuple[list[str], ClusterAssignment]:
    rows = [ln.split(",") for ln in Path(path).read_text(encoding="utf-8").splitlines()[1:] if ln.strip()]
    ids = [r[0] for r in rows]
    labels = np.array([int(r[1]) for r in rows])
    return ids, ClusterAssignment(labels, int(labels.max()))


def write_sweep_csv(path, rows) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("Z,BC,WC,AC\n")
        for z, q in rows:
            fh.write(f"{z},{q.BC:.12g},{q.WC:.12g},{q.AC:.12g}\n")


def write_geojson(path, trajs, assignment: ClusterAssignment) -> None:
    """LineString per trajectory with its cluster in the feature properties."""
    trajs = list(trajs)
    if len(trajs) != len(assignment):
        raise ValueError("one trajectory per label required")
    features = []
    for t, lab in zip(trajs, assignment.labels):
        coords = [[round(float(x), 9), round(float(y), 9)] for x, y in zip(t.lng, t.lat)]
        geometry = {"type": "LineString", "coordinates": coords} if len(coords) > 1 else {
            "type": "Point",
            "coordinates": coords[0],
        }
        features.append({"type": "Feature", "properties": {"id": t.id, "cluster": int(lab)}, "geometry": geometry})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n", encoding="utf-8")
