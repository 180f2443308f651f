"""Point-set kernels: farthest point sampling, KNN, and scan serialization.

All functions are pure and operate on plain numpy arrays. Ties are always
broken toward the lowest index so results are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

SCAN_KINDS = ("x", "y", "z", "inside_out", "knn_distance", "identity")
_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class PointSet:
    """One level of the hierarchy: coordinates, position embeddings, features.

    Row ``i`` of every matrix refers to the same point. The matrices may be
    numpy arrays or autodiff tensors, and may carry a leading batch axis.
    """

    coords: np.ndarray
    pos_embed: object
    features: object

    def __post_init__(self):
        n = self.coords.shape[-2]
        for name in ("pos_embed", "features"):
            m = getattr(self, name)
            if m is not None and m.shape[-2] != n:
                raise ValueError(f"{name} has {m.shape[-2]} rows, coords has {n}")

    @property
    def n_points(self) -> int:
        return self.coords.shape[-2]


@dataclass(frozen=True)
class ScanIndex:
    """A serialization order over ``len(order)`` points."""

    order: np.ndarray
    kind: str = "identity"
    transposed: bool = False

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        if order.ndim != 1:
            raise ValueError("scan order must be one-dimensional")
        object.__setattr__(self, "order", order)

    def __len__(self):
        return len(self.order)

    def __eq__(self, other):
        if not isinstance(other, ScanIndex):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.transposed == other.transposed
            and np.array_equal(self.order, other.order)
        )

    @property
    def name(self) -> str:
        return self.kind + ("_t" if self.transposed else "")


@dataclass
class NeighborGroup:
    """KNN result: ``indices[q]`` are the k nearest reference rows of query q."""

    indices: np.ndarray
    distances: np.ndarray
    center_count: int = field(init=False)

    def __post_init__(self):
        self.center_count = self.indices.shape[0]


def _check_permutation(order: np.ndarray) -> None:
    n = len(order)
    seen = np.zeros(n, dtype=bool)
    if n and (order.min() < 0 or order.max() >= n):
        raise ValueError("scan order is not a permutation: index out of range")
    seen[order] = True
    if not seen.all():
        raise ValueError("scan order is not a permutation: repeated index")


# ---------------------------------------------------------------------------
# Farthest point sampling
# ---------------------------------------------------------------------------


@numba.njit(cache=True, error_model="numpy")
def _fps_kernel(coords, m, first):
    n, d = coords.shape
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    selected = np.zeros(n, dtype=np.bool_)
    cur = first
    for i in range(m):
        out[i] = cur
        selected[cur] = True
        best = -1.0
        best_j = -1
        for j in range(n):
            if selected[j]:
                continue
            s = 0.0
            for c in range(d):
                diff = coords[j, c] - coords[cur, c]
                s += diff * diff
            if s < mind[j]:
                mind[j] = s
            if mind[j] > best:
                best = mind[j]
                best_j = j
        cur = best_j
    return out


def farthest_point_sample(coords, m: int, seed: str = "nearest_to_centroid") -> np.ndarray:
    """Greedy max-min subset selection.

    Args:
        coords: (N, d) point coordinates.
        m: number of points to select, ``1 <= m <= N``.
        seed: ``"nearest_to_centroid"`` starts from the point closest to the
            coordinate mean, ``"first_index"`` starts from row 0.

    Returns:
        (m,) int64 array of distinct row indices in selection order.
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if m < 1 or m > n:
        raise ValueError(f"cannot sample m={m} points from N={n}")
    if seed == "nearest_to_centroid":
        d2 = ((coords - coords.mean(axis=0)) ** 2).sum(axis=1)
        # distances equal up to rounding of the mean count as ties: lowest index wins
        first = int(np.flatnonzero(d2 <= d2.min() * (1 + 1e-12) + 1e-300)[0])
    elif seed == "first_index":
        first = 0
    else:
        raise ValueError(f"unknown FPS seed {seed!r}")
    return _fps_kernel(coords, m, first)


# ---------------------------------------------------------------------------
# K nearest neighbours
# ---------------------------------------------------------------------------


@numba.njit(cache=True, error_model="numpy")
def _knn_kernel(queries, reference, k):
    q_n, c_n = queries.shape
    r_n = reference.shape[0]
    idx = np.empty((q_n, k), dtype=np.int64)
    dist = np.empty((q_n, k))
    for q in range(q_n):
        cnt = 0
        for j in range(r_n):
            s = 0.0
            for c in range(c_n):
                diff = queries[q, c] - reference[j, c]
                s += diff * diff
            if cnt == k and s >= dist[q, k - 1]:
                continue
            # insertion after every entry with distance <= s keeps index order on ties
            pos = cnt if cnt < k else k - 1
            while pos > 0 and dist[q, pos - 1] > s:
                if pos < k:
                    dist[q, pos] = dist[q, pos - 1]
                    idx[q, pos] = idx[q, pos - 1]
                pos -= 1
            dist[q, pos] = s
            idx[q, pos] = j
            if cnt < k:
                cnt += 1
    return idx, dist


def knn_query(queries, reference, k: int) -> NeighborGroup:
    """The ``k`` nearest reference rows of every query row (Euclidean).

    Works in metric space or feature space alike. Rows are sorted by
    ascending distance; equal distances keep the lower reference index first.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    reference = np.ascontiguousarray(reference, dtype=np.float64)
    n = reference.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"cannot query k={k} neighbours from N={n} reference points")
    if queries.shape[1] != reference.shape[1]:
        raise ValueError("query and reference widths differ")
    idx, d2 = _knn_kernel(queries, reference, k)
    return NeighborGroup(idx, np.sqrt(d2))


# ---------------------------------------------------------------------------
# Serialization scans and permutation algebra
# ---------------------------------------------------------------------------


def scan_coordinate(coords, axis: str) -> ScanIndex:
    """Sort points along one axis; ties fall back to the other coordinates, then index."""
    coords = np.asarray(coords)
    if axis not in _AXES:
        raise ValueError(f"unknown axis {axis!r}")
    a = _AXES[axis]
    d = coords.shape[1]
    if a >= d:
        raise ValueError(f"axis {axis!r} not available for {d}-D coordinates")
    rest = [c for c in range(d) if c != a]
    # np.lexsort treats the last key as primary and is stable
    keys = tuple(coords[:, c] for c in reversed(rest)) + (coords[:, a],)
    return ScanIndex(np.lexsort(keys), kind=axis)


def scan_inside_out(coords) -> ScanIndex:
    """Sort points by distance to the centroid, nearest first."""
    coords = np.asarray(coords, dtype=np.float64)
    d2 = ((coords - coords.mean(axis=0)) ** 2).sum(axis=1)
    return ScanIndex(np.argsort(d2, kind="stable"), kind="inside_out")


def invert_indices(scan: ScanIndex) -> ScanIndex:
    order = scan.order
    _check_permutation(order)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return ScanIndex(inv, kind=scan.kind, transposed=scan.transposed)


def transpose_indices(scan: ScanIndex) -> ScanIndex:
    """Traverse the scan back to front."""
    return ScanIndex(scan.order[::-1].copy(), kind=scan.kind, transposed=not scan.transposed)


def gather_rows(p, scan) -> np.ndarray:
    order = scan.order if isinstance(scan, ScanIndex) else np.asarray(scan)
    p = np.asarray(p)
    if len(order) != p.shape[0]:
        raise ValueError(f"scan length {len(order)} does not match {p.shape[0]} rows")
    if len(order) and (order.min() < 0 or order.max() >= p.shape[0]):
        raise ValueError("scan index out of range")
    return p[order]


def make_scan(coords, name: str) -> ScanIndex:
    """Build a scan by name: ``x``, ``y``, ``z``, ``io`` (inside-out), a
    ``_t`` suffix for the transposed variant, or ``identity``."""
    transposed = name.endswith("_t")
    base = name[:-2] if transposed else name
    if base in _AXES:
        scan = scan_coordinate(coords, base)
    elif base in ("io", "inside_out"):
        scan = scan_inside_out(coords)
    elif base == "identity":
        scan = ScanIndex(np.arange(len(coords)), kind="identity")
    else:
        raise ValueError(f"unknown scan strategy {name!r}")
    return transpose_indices(scan) if transposed else scan


DEFAULT_SCANS = ("x", "y", "z", "io", "x_t", "y_t", "z_t", "io_t")
