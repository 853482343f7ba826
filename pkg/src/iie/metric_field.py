"""Geometric core: point sets, push-forward metrics and local intrinsic distances.

The push-forward metric at an observed point ``y = f(x)`` is the pseudo-inverse
of ``J J^T`` where ``J = df/dx(x)``.  With it, the squared intrinsic distance
between two nearby observations is approximated by averaging the quadratic
forms of the two endpoint metrics.  Everything downstream (graphs, geodesics,
embeddings) consumes these local estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .errors import (
    DegenerateJacobian,
    DisconnectedGraph,
    InvalidInput,
    NonPSDMetric,
)

PINV_RTOL = 1e-12
NEG_CLAMP = 1e-12


def _frozen(a):
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointSet:
    """N points of equal dimension; row ``i`` has id ``i``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[1] < 1:
            raise InvalidInput(f"points must be an (N, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInput("points contain non-finite entries")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def __len__(self):
        return self.points.shape[0]

    def subset(self, ids) -> PointSet:
        return PointSet(self.points[np.asarray(ids, dtype=int)])


@dataclass(frozen=True)
class JacobianEstimate:
    matrix: np.ndarray
    base_point_id: int = -1

    def __post_init__(self):
        J = np.asarray(self.matrix, dtype=float)
        if J.ndim == 1:
            J = J[:, None]
        if J.ndim != 2:
            raise InvalidInput(f"Jacobian must be 2-D, got shape {J.shape}")
        if not np.all(np.isfinite(J)):
            raise InvalidInput("Jacobian contains non-finite entries")
        if J.shape[0] < J.shape[1]:
            raise InvalidInput(f"Jacobian must have m >= n, got {J.shape}")
        object.__setattr__(self, "matrix", _frozen(J))


@dataclass(frozen=True)
class MetricTensor:
    matrix: np.ndarray
    rank_target: int

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise InvalidInput(f"metric must be square, got shape {M.shape}")
        if not np.all(np.isfinite(M)):
            raise InvalidInput("metric contains non-finite entries")
        scale = max(np.abs(M).max(), np.finfo(float).tiny)
        if np.abs(M - M.T).max() > 1e-10 * scale:
            raise NonPSDMetric("metric is not symmetric")
        M = 0.5 * (M + M.T)
        w = np.linalg.eigvalsh(M)
        if w[0] < -1e-10 * max(w[-1], 0.0) - np.finfo(float).tiny:
            raise NonPSDMetric(f"metric has negative eigenvalue {w[0]:.3g}")
        object.__setattr__(self, "matrix", _frozen(M))
        object.__setattr__(self, "rank_target", int(self.rank_target))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class MetricField:
    """Stacked metric tensors, one ``(m, m)`` matrix per observed point."""

    tensors: np.ndarray
    intrinsic_dim: int

    def __post_init__(self):
        T = np.asarray(self.tensors, dtype=float)
        if T.ndim != 3 or T.shape[1] != T.shape[2]:
            raise InvalidInput(f"tensors must have shape (N, m, m), got {T.shape}")
        if not np.all(np.isfinite(T)):
            raise InvalidInput("metric field contains non-finite entries")
        object.__setattr__(self, "tensors", _frozen(0.5 * (T + T.transpose(0, 2, 1))))

    def __len__(self):
        return self.tensors.shape[0]

    def __getitem__(self, i) -> MetricTensor:
        return MetricTensor(self.tensors[i], self.intrinsic_dim)

    @property
    def dim(self) -> int:
        return self.tensors.shape[1]

    @classmethod
    def from_jacobians(cls, jacobians) -> MetricField:
        J = np.asarray(jacobians, dtype=float)
        return cls(pushforward_metrics(J), J.shape[2])

    def subset(self, ids) -> MetricField:
        return MetricField(self.tensors[np.asarray(ids, dtype=int)], self.intrinsic_dim)


def pushforward_metrics(jacobians: np.ndarray) -> np.ndarray:
    """Vectorised ``pinv(J J^T)`` for a stack of Jacobians with shape (N, m, n)."""
    J = np.asarray(jacobians, dtype=float)
    if J.ndim != 3:
        raise InvalidInput(f"expected (N, m, n) Jacobians, got {J.shape}")
    if not np.all(np.isfinite(J)):
        raise InvalidInput("Jacobian contains non-finite entries")
    U, s, _ = np.linalg.svd(J, full_matrices=False)
    ev = s**2  # singular values of J J^T
    top = ev.max(axis=1, keepdims=True)
    if np.any(top == 0):
        bad = int(np.flatnonzero(top[:, 0] == 0)[0])
        raise DegenerateJacobian(f"Jacobian at index {bad} is zero (or J J^T underflows)")
    keep = ev > PINV_RTOL * top
    inv = np.where(keep, 1.0 / np.where(keep, ev, 1.0), 0.0)
    M = np.einsum("nik,nk,njk->nij", U, inv, U)
    return 0.5 * (M + M.transpose(0, 2, 1))


def pushforward_metric(jac: JacobianEstimate) -> MetricTensor:
    """Moore-Penrose pseudo-inverse of ``J J^T`` computed from the SVD of ``J``."""
    if not isinstance(jac, JacobianEstimate):
        jac = JacobianEstimate(jac)
    J = jac.matrix
    return MetricTensor(pushforward_metrics(J[None])[0], J.shape[1])


def _as_matrix(M):
    return M.matrix if isinstance(M, MetricTensor) else np.asarray(M, dtype=float)


def approx_intrinsic_sq_distance(y_i, y_j, M_i, M_j) -> float:
    y_i = np.asarray(y_i, dtype=float)
    y_j = np.asarray(y_j, dtype=float)
    A, B = _as_matrix(M_i), _as_matrix(M_j)
    if y_i.shape != y_j.shape or A.shape != (y_i.size, y_i.size) or B.shape != A.shape:
        raise InvalidInput("dimension mismatch between points and metrics")
    d = y_i - y_j
    val = 0.5 * (d @ A @ d) + 0.5 * (d @ B @ d)
    if val < -NEG_CLAMP:
        raise NonPSDMetric(f"negative squared distance {val:.3g}")
    return max(float(val), 0.0)


def pair_sq_distances(Y: np.ndarray, tensors: np.ndarray, i, j) -> np.ndarray:
    """Approximate squared intrinsic distances for index arrays ``i``, ``j``."""
    i = np.asarray(i, dtype=int)
    j = np.asarray(j, dtype=int)
    d = Y[i] - Y[j]
    qi = np.einsum("pa,pab,pb->p", d, tensors[i], d)
    qj = np.einsum("pa,pab,pb->p", d, tensors[j], d)
    val = 0.5 * qi + 0.5 * qj
    if val.size and val.min() < -NEG_CLAMP:
        raise NonPSDMetric(f"negative squared distance {val.min():.3g}")
    return np.maximum(val, 0.0)


def all_pairs_sq_distances(Y: np.ndarray, tensors: np.ndarray) -> np.ndarray:
    """Dense N x N matrix of the local approximation applied to every pair.

    Only meaningful for short pairs; used for diagnostics of the locality of
    the approximation.
    """
    Y = np.asarray(Y, dtype=float)
    N = Y.shape[0]
    out = np.empty((N, N))
    # q[i, j] = (y_i - y_j)^T M_i (y_i - y_j)
    for i in range(N):
        d = Y - Y[i]
        out[i] = np.einsum("pa,ab,pb->p", d, tensors[i], d)
    out = 0.5 * (out + out.T)
    if out.min() < -NEG_CLAMP:
        raise NonPSDMetric(f"negative squared distance {out.min():.3g}")
    return np.maximum(out, 0.0)


@dataclass(frozen=True)
class DistanceGraph:
    """Undirected edge list ``(i, j, dist, weight)`` with ``i < j``."""

    i: np.ndarray
    j: np.ndarray
    dist: np.ndarray
    weight: np.ndarray
    num_vertices: int
    dropped: tuple = field(default=())

    def __post_init__(self):
        i = np.asarray(self.i, dtype=np.int64).ravel()
        j = np.asarray(self.j, dtype=np.int64).ravel()
        d = np.asarray(self.dist, dtype=float).ravel()
        w = np.asarray(self.weight, dtype=float).ravel()
        if not (i.size == j.size == d.size == w.size):
            raise InvalidInput("edge arrays have different lengths")
        if i.size and (np.any(i >= j) or i.min() < 0 or j.max() >= self.num_vertices):
            raise InvalidInput("edges must satisfy 0 <= i < j < num_vertices")
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise InvalidInput("edge distances must be finite and non-negative")
        if np.any((w != 0) & (w != 1)):
            raise InvalidInput("edge weights must be 0 or 1")
        key = i * self.num_vertices + j
        if np.unique(key).size != key.size:
            raise InvalidInput("duplicate edges")
        order = np.argsort(key, kind="stable")
        object.__setattr__(self, "i", _ro(i[order]))
        object.__setattr__(self, "j", _ro(j[order]))
        object.__setattr__(self, "dist", _ro(d[order]))
        object.__setattr__(self, "weight", _ro(w[order]))
        object.__setattr__(self, "num_vertices", int(self.num_vertices))
        object.__setattr__(self, "dropped", tuple(int(v) for v in self.dropped))

    def __len__(self):
        return self.i.size

    @property
    def edges(self):
        return list(zip(self.i.tolist(), self.j.tolist(), self.dist.tolist(), self.weight.tolist()))

    def active(self) -> DistanceGraph:
        """Only the edges with weight 1."""
        keep = self.weight > 0
        return DistanceGraph(self.i[keep], self.j[keep], self.dist[keep], self.weight[keep], self.num_vertices)

    def adjacency(self, lengths=None) -> csr_matrix:
        """Symmetric CSR matrix of trusted edges; ``lengths`` overrides ``dist``."""
        keep = self.weight > 0
        vals = self.dist if lengths is None else np.asarray(lengths, dtype=float)
        vals = vals[keep]
        ii, jj = self.i[keep], self.j[keep]
        N = self.num_vertices
        # explicit zeros are kept: csgraph treats stored entries as edges
        A = coo_matrix((np.r_[vals, vals], (np.r_[ii, jj], np.r_[jj, ii])), shape=(N, N))
        return A.tocsr()

    def degrees(self) -> np.ndarray:
        keep = self.weight > 0
        return np.bincount(np.r_[self.i[keep], self.j[keep]], minlength=self.num_vertices)

    def components(self) -> list[np.ndarray]:
        """Connected components, largest first (ties by smallest vertex id)."""
        _, labels = connected_components(self.adjacency(), directed=False)
        comps = [np.flatnonzero(labels == c) for c in range(labels.max() + 1)] if labels.size else []
        comps.sort(key=lambda c: (-c.size, c[0]))
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def induced(self, ids) -> DistanceGraph:
        """Subgraph on ``ids`` relabelled to ``0..len(ids)-1`` in the given order."""
        ids = np.asarray(ids, dtype=int)
        remap = np.full(self.num_vertices, -1)
        remap[ids] = np.arange(ids.size)
        a, b = remap[self.i], remap[self.j]
        keep = (a >= 0) & (b >= 0)
        a, b = a[keep], b[keep]
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return DistanceGraph(lo, hi, self.dist[keep], self.weight[keep], ids.size)

    def largest_component(self) -> tuple[DistanceGraph, np.ndarray]:
        """Restrict to the largest component; returns the subgraph and kept ids.

        Vertex ids outside the component are recorded in ``dropped``.
        """
        comps = self.components()
        if len(comps) <= 1:
            return self, np.arange(self.num_vertices)
        keep = comps[0]
        sub = self.induced(keep)
        dropped = np.setdiff1d(np.arange(self.num_vertices), keep)
        sub = DistanceGraph(sub.i, sub.j, sub.dist, sub.weight, sub.num_vertices, dropped=tuple(dropped))
        return sub, keep


def _ro(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _symmetrize(rows, cols, N):
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    key = np.unique(lo.astype(np.int64) * N + hi)
    return key // N, key % N


def build_knn_graph(observed: PointSet, field: MetricField, k: int, candidates: int | None = None) -> DistanceGraph:
    """k-nearest-neighbour graph under the approximated intrinsic distance.

    For each point the ``k`` neighbours with smallest approximated intrinsic
    distance are selected among its ``candidates`` nearest observed-space
    neighbours (all other points when ``candidates`` is None).  The edge set is
    the union of both directions; every edge gets weight 1.
    """
    N = len(observed)
    k = int(k)
    if k < 1 or k >= N:
        raise InvalidInput(f"k must satisfy 1 <= k < N={N}, got {k}")
    if len(field) != N or field.dim != observed.dim:
        raise InvalidInput("metric field does not cover the observed points")
    Y = observed.points
    T = field.tensors
    if candidates is None or candidates >= N - 1:
        pool = None
    else:
        pool = max(int(candidates), k)
        _, nbr = cKDTree(Y).query(Y, k=pool + 1)
        nbr = nbr[:, 1:]
    rows, cols = [], []
    for i in range(N):
        cand = np.delete(np.arange(N), i) if pool is None else nbr[i]
        d = Y[cand] - Y[i]
        q = 0.5 * np.einsum("pa,ab,pb->p", d, T[i], d) + 0.5 * np.einsum("pa,pab,pb->p", d, T[cand], d)
        # stable sort so ties resolve to the lower id / nearer observed neighbour
        sel = cand[np.argsort(q, kind="stable")[:k]]
        rows.append(np.full(k, i))
        cols.append(sel)
    ii, jj = _symmetrize(np.concatenate(rows), np.concatenate(cols), N)
    dist = np.sqrt(pair_sq_distances(Y, T, ii, jj))
    return DistanceGraph(ii, jj, dist, np.ones(ii.size), N)


def euclidean_knn_graph(observed: PointSet, k: int) -> DistanceGraph:
    """Plain observed-space kNN graph (the standard Isomap graph)."""
    N = len(observed)
    k = int(k)
    if k < 1 or k >= N:
        raise InvalidInput(f"k must satisfy 1 <= k < N={N}, got {k}")
    Y = observed.points
    _, nbr = cKDTree(Y).query(Y, k=k + 1)
    # drop self; duplicates may put self anywhere in the row
    rows, cols = [], []
    for i in range(N):
        row = [c for c in nbr[i] if c != i][:k]
        rows.append(np.full(len(row), i))
        cols.append(np.asarray(row, dtype=int))
    ii, jj = _symmetrize(np.concatenate(rows), np.concatenate(cols), N)
    dist = np.linalg.norm(Y[ii] - Y[jj], axis=1)
    return DistanceGraph(ii, jj, dist, np.ones(ii.size), N)


def geodesic_all_pairs(graph: DistanceGraph, lengths=None) -> np.ndarray:
    """All-pairs shortest paths over the trusted edges (Dijkstra per source)."""
    comps = graph.components()
    if len(comps) > 1:
        raise DisconnectedGraph(comps)
    D = dijkstra(graph.adjacency(lengths), directed=False)
    D = np.minimum(D, D.T)
    np.fill_diagonal(D, 0.0)
    return D


def intrinsic_path_length(path, observed: PointSet, field: MetricField) -> float:
    """Sum of approximated intrinsic lengths of consecutive path segments."""
    path = np.asarray(list(path), dtype=int)
    if path.size < 2:
        return 0.0
    sq = pair_sq_distances(observed.points, field.tensors, path[:-1], path[1:])
    return float(np.sqrt(sq).sum())
