"""Embedding construction.

The direct pipeline embeds graph geodesics with classical MDS (intrinsic
Isomap) and then refines the result by weighted-stress SMACOF restricted to the
trusted short-range edges.  When the refined embedding is inconsistent with
the graph geodesics, the multi-scale scheme splits the graph into two
overlapping patches, embeds each recursively, registers them on their overlap
and refines the merged layout globally.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.distance import pdist

from .errors import DegenerateAlignment, InvalidInput, IIEError, SplitFailed
from .metric_field import DistanceGraph, PointSet, euclidean_knn_graph, geodesic_all_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FailureReport:
    rho: float
    threshold: float
    failed: bool
    num_pairs: int

    def to_dict(self):
        return {"rho": self.rho, "threshold": self.threshold, "failed": self.failed, "num_pairs": self.num_pairs}


@dataclass(frozen=True)
class EmbeddingResult:
    coords: np.ndarray
    stress: float
    full_stress_vs_truth: float | None = None
    iterations: int = 0
    converged: bool = True
    rank_deficient: bool = False
    failure: FailureReport | None = None
    tree: dict | None = None
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        X = np.array(self.coords, dtype=float)
        if X.ndim != 2 or not np.all(np.isfinite(X)):
            raise InvalidInput("embedding coordinates must be a finite (N, n) array")
        X.setflags(write=False)
        object.__setattr__(self, "coords", X)

    def with_truth(self, truth) -> EmbeddingResult:
        return replace(self, full_stress_vs_truth=full_stress(self.coords, truth))

    def diagnostics(self) -> dict:
        return {
            "stress": self.stress,
            "full_stress_vs_truth": self.full_stress_vs_truth,
            "iterations": self.iterations,
            "converged": self.converged,
            "rank_deficient": self.rank_deficient,
            "failure_report": None if self.failure is None else self.failure.to_dict(),
            "patch_tree": self.tree,
        }


@dataclass(frozen=True)
class Patch:
    vertex_ids: np.ndarray
    overlap_ids: np.ndarray


@dataclass(frozen=True)
class MultiscaleConfig:
    enabled: bool = True
    threshold: float = 0.1
    overlap_margin: float = 0.2
    min_patch_size: int = 50
    max_depth: int = 4
    smacof_tol: float = 1e-6
    smacof_max_iter: int = 1000
    failure_sources: int = 200


# ---------------------------------------------------------------- stress


def weighted_stress(coords, graph: DistanceGraph) -> float:
    """Sum over edges of ``w (|x_i - x_j| - d_ij)^2``."""
    X = np.asarray(coords, dtype=float)
    if X.shape[0] < graph.num_vertices:
        raise InvalidInput("coordinates do not cover all graph vertices")
    if len(graph) == 0:
        return 0.0
    r = np.linalg.norm(X[graph.i] - X[graph.j], axis=1) - graph.dist
    return float(np.sum(graph.weight * r * r))


def _dist_matrix_of(truth) -> np.ndarray:
    P = truth.points if isinstance(truth, PointSet) else np.asarray(truth, dtype=float)
    return pdist(P)


def full_stress(coords, truth) -> float:
    """Unweighted all-pairs stress against ground-truth intrinsic positions."""
    X = np.asarray(coords, dtype=float)
    t = _dist_matrix_of(truth)
    if X.shape[0] * (X.shape[0] - 1) // 2 != t.size:
        raise InvalidInput("coords and truth have different sizes")
    r = pdist(X) - t
    return float(r @ r)


# ---------------------------------------------------------------- MDS / Isomap


def _stress_vs_matrix(X, D):
    iu = np.triu_indices(D.shape[0], 1)
    r = pdist(X) - D[iu]
    return float(r @ r)


def classical_mds(dist_matrix, n: int) -> EmbeddingResult:
    """Torgerson scaling: top-``n`` eigenpairs of the double-centred squared distances."""
    D = np.asarray(dist_matrix, dtype=float)
    N = D.shape[0]
    if D.ndim != 2 or D.shape[1] != N:
        raise InvalidInput("distance matrix must be square")
    if not np.all(np.isfinite(D)) or np.any(D < 0):
        raise InvalidInput("distances must be finite and non-negative")
    scale = max(D.max(), 1.0) if N else 1.0
    if np.abs(D - D.T).max(initial=0.0) > 1e-9 * scale or np.abs(np.diag(D)).max(initial=0.0) > 1e-12 * scale:
        raise InvalidInput("distance matrix must be symmetric with zero diagonal")
    D2 = (0.5 * (D + D.T)) ** 2
    B = -0.5 * (D2 - D2.mean(axis=0) - D2.mean(axis=1)[:, None] + D2.mean())
    k = min(n, N)
    w, V = eigh(B, subset_by_index=[N - k, N - 1]) if k else (np.zeros(0), np.zeros((N, 0)))
    w, V = w[::-1], V[:, ::-1]
    # deterministic sign: largest-magnitude component positive
    flip = np.sign(V[np.abs(V).argmax(axis=0), np.arange(k)])
    V = V * np.where(flip == 0, 1.0, flip)
    tol = 1e-12 * max(abs(w[0]) if k else 0.0, np.finfo(float).tiny)
    pos = w > tol
    X = np.zeros((N, n))
    X[:, :k] = V * np.sqrt(np.where(pos, w, 0.0))
    rank_deficient = int(pos.sum()) < n
    return EmbeddingResult(X, _stress_vs_matrix(X, D), rank_deficient=rank_deficient)


def standard_isomap(observed: PointSet, k: int, n: int) -> EmbeddingResult:
    """Isomap on observed Euclidean distances (no metric correction)."""
    graph = euclidean_knn_graph(observed, k)
    res = classical_mds(geodesic_all_pairs(graph), n)
    return replace(res, stress=weighted_stress(res.coords, graph))


def intrinsic_isomap(graph: DistanceGraph, n: int, geodesics=None) -> EmbeddingResult:
    """Classical MDS of the shortest-path distances over metric-corrected edges."""
    G = geodesic_all_pairs(graph) if geodesics is None else geodesics
    res = classical_mds(G, n)
    return replace(res, stress=weighted_stress(res.coords, graph))


# ---------------------------------------------------------------- SMACOF


class _Guttman:
    """Cached pieces of the weighted Guttman transform for one graph."""

    def __init__(self, graph: DistanceGraph):
        g = graph.active()
        self.i, self.j, self.d = g.i, g.j, g.dist
        N = graph.num_vertices
        V = np.zeros((N, N))
        np.add.at(V, (g.i, g.j), -1.0)
        np.add.at(V, (g.j, g.i), -1.0)
        V[np.diag_indices(N)] = -V.sum(axis=1)
        if graph.is_connected():
            ones = np.full((N, N), 1.0 / N)
            self.Vp = np.linalg.inv(V + ones) - ones
        else:
            self.Vp = np.linalg.pinv(V, hermitian=True)
        self.N = N

    def step(self, X):
        diff = X[self.i] - X[self.j]
        dist = np.linalg.norm(diff, axis=1)
        coincident = dist == 0
        if np.any(coincident):
            log.warning("SMACOF: %d connected pairs coincide; their ratio terms are set to 0", int(coincident.sum()))
        ratio = np.where(coincident, 0.0, self.d / np.where(coincident, 1.0, dist))
        contrib = ratio[:, None] * diff
        BX = np.zeros_like(X)
        np.add.at(BX, self.i, contrib)
        np.add.at(BX, self.j, -contrib)
        return self.Vp @ BX

    def stress(self, X):
        r = np.linalg.norm(X[self.i] - X[self.j], axis=1) - self.d
        return float(r @ r)


def smacof_step(coords, graph: DistanceGraph) -> np.ndarray:
    """One Guttman transform ``V^+ B(X) X`` for the weighted stress."""
    X = np.asarray(coords, dtype=float)
    if X.shape[0] != graph.num_vertices:
        raise InvalidInput("coordinates do not match the graph")
    return _Guttman(graph).step(X)


MONOTONE_RTOL = 1e-12


def smacof_optimize(init, graph: DistanceGraph, tol=1e-6, max_iter=1000, _cache=None) -> EmbeddingResult:
    """Iterate Guttman transforms until the relative stress decrease drops below ``tol``."""
    X = np.array(init, dtype=float)
    if X.shape[0] != graph.num_vertices or not np.all(np.isfinite(X)):
        raise InvalidInput("init must be a finite (N, n) array matching the graph")
    gt = _cache or _Guttman(graph)
    # stresses below this are rounding noise of the distance terms
    floor = 1e-24 * float(gt.d @ gt.d)
    s = gt.stress(X)
    history = [s]
    converged = s <= floor
    it = 0
    while it < max_iter and not converged:
        Xn = gt.step(X)
        sn = gt.stress(Xn)
        it += 1
        if sn > s * (1 + MONOTONE_RTOL) + floor:
            raise IIEError(f"SMACOF stress increased at iteration {it}: {s!r} -> {sn!r}")
        history.append(sn)
        decrease = (s - sn) / s if s > 0 else 0.0
        X, s = Xn, sn
        if s <= floor or decrease < tol:
            converged = True
    return EmbeddingResult(X, weighted_stress(X, graph), iterations=it, converged=converged, history=tuple(history))


# ---------------------------------------------------------------- registration


def procrustes_align(source, target, ids=None):
    """Orthogonal ``Q`` and translation ``t`` minimising ``sum |Q s + t - g|^2``.

    Reflections are allowed.  ``ids`` selects corresponding rows (same index in
    both arrays); pass a pair ``(src_ids, tgt_ids)`` for different indexings.
    """
    S = np.asarray(source, dtype=float)
    G = np.asarray(target, dtype=float)
    if ids is not None:
        if isinstance(ids, tuple) and len(ids) == 2:
            S, G = S[np.asarray(ids[0], dtype=int)], G[np.asarray(ids[1], dtype=int)]
        else:
            idx = np.asarray(ids, dtype=int)
            S, G = S[idx], G[idx]
    if S.shape != G.shape or S.ndim != 2:
        raise InvalidInput(f"correspondence shapes differ: {S.shape} vs {G.shape}")
    n = S.shape[1]
    if S.shape[0] < n + 1:
        raise DegenerateAlignment(f"need at least {n + 1} correspondences, got {S.shape[0]}")
    ms, mg = S.mean(axis=0), G.mean(axis=0)
    Sc, Gc = S - ms, G - mg
    sv = np.linalg.svd(Sc, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], np.finfo(float).tiny):
        raise DegenerateAlignment("correspondences are not in general position")
    U, _, Vt = np.linalg.svd(Sc.T @ Gc)
    Q = Vt.T @ U.T
    t = mg - Q @ ms
    return Q, t


def apply_transform(X, Q, t):
    return np.asarray(X, dtype=float) @ Q.T + t


def align_to_truth(coords, truth) -> tuple[np.ndarray, float]:
    """Rigidly align ``coords`` onto ``truth``; returns aligned coords and RMSD."""
    P = truth.points if isinstance(truth, PointSet) else np.asarray(truth, dtype=float)
    Q, t = procrustes_align(coords, P)
    A = apply_transform(coords, Q, t)
    return A, float(np.sqrt(np.mean(np.sum((A - P) ** 2, axis=1))))


# ---------------------------------------------------------------- failure detection


def _source_sample(N, max_sources):
    if max_sources is None or max_sources >= N:
        return np.arange(N)
    return np.unique(np.linspace(0, N - 1, max_sources).round().astype(int))


def detect_embedding_failure(embed, graph: DistanceGraph, geodesics, threshold=0.1, max_sources=200) -> FailureReport:
    """Median relative gap between graph geodesics and their embedded counterparts.

    The embedded geodesics reuse the graph's edge set with edge lengths taken
    from the embedding, so a non-convex but faithful layout is not flagged.
    Pairs are all (source, target) pairs for an evenly spaced set of sources.
    """
    X = embed.coords if isinstance(embed, EmbeddingResult) else np.asarray(embed, dtype=float)
    G = np.asarray(geodesics, dtype=float)
    N = graph.num_vertices
    if N < 2:
        return FailureReport(0.0, float(threshold), False, 0)
    src = _source_sample(N, max_sources)
    lengths = np.linalg.norm(X[graph.i] - X[graph.j], axis=1)
    E = dijkstra(graph.adjacency(lengths), directed=False, indices=src)
    ref = G[src]
    mask = ref > 0
    rel = np.abs(ref[mask] - E[mask]) / ref[mask]
    rho = float(np.median(rel)) if rel.size else 0.0
    return FailureReport(rho, float(threshold), bool(rho > threshold), int(rel.size))


# ---------------------------------------------------------------- multi-scale


def split_patches(
    graph: DistanceGraph, geodesics, overlap_margin=0.2, min_patch_size=50, min_overlap=3
) -> tuple[Patch, Patch]:
    """Split at the two geodesically farthest vertices into overlapping halves.

    Each vertex joins the patch of its nearer pole; vertices whose two pole
    distances differ by less than ``overlap_margin`` times the pole separation
    join both.
    """
    G = np.asarray(geodesics, dtype=float)
    N = graph.num_vertices
    if N < 2 * min_patch_size or N < 2:
        raise SplitFailed(f"{N} vertices is below twice the minimum patch size {min_patch_size}")
    a, b = np.unravel_index(np.argmax(G), G.shape)
    a, b = min(a, b), max(a, b)
    sep = G[a, b]
    if not np.isfinite(sep) or sep <= 0:
        raise SplitFailed("degenerate geodesic separation")
    da, db = G[a], G[b]
    band = np.abs(da - db) < overlap_margin * sep
    side_a = da <= db
    p1 = side_a | band
    p2 = ~side_a | band
    p1, p2 = _repair(graph, p1, a), _repair(graph, p2, b)
    overlap = np.flatnonzero(p1 & p2)
    ids1, ids2 = np.flatnonzero(p1), np.flatnonzero(p2)
    if min(ids1.size, ids2.size) < min_patch_size or ids1.size == N or ids2.size == N:
        raise SplitFailed("split produced an undersized or trivial patch")
    if overlap.size < min_overlap:
        raise SplitFailed("overlap too small to register the patches")
    return Patch(ids1, overlap), Patch(ids2, overlap)


def _repair(graph, mask, pole):
    """Keep the component of the induced subgraph that holds the pole."""
    ids = np.flatnonzero(mask)
    sub = graph.induced(ids)
    comps = sub.components()
    if len(comps) <= 1:
        return mask
    pole_local = int(np.searchsorted(ids, pole))
    keep = next(c for c in comps if pole_local in c)
    log.warning("patch split: dropping %d vertices disconnected from their pole", ids.size - keep.size)
    out = np.zeros_like(mask)
    out[ids[keep]] = True
    return out


def _direct(graph, n, cfg, geodesics):
    init = intrinsic_isomap(graph, n, geodesics)
    res = smacof_optimize(init.coords, graph, cfg.smacof_tol, cfg.smacof_max_iter)
    return replace(res, rank_deficient=init.rank_deficient)


def multiscale_embed(graph: DistanceGraph, n: int, config: MultiscaleConfig | None = None) -> EmbeddingResult:
    """Direct intrinsic-isometric embedding with recursive patch fallback."""
    cfg = config or MultiscaleConfig()
    return _multiscale(graph, n, cfg, 0)


def _multiscale(graph, n, cfg, depth):
    G = geodesic_all_pairs(graph)
    res = _direct(graph, n, cfg, G)
    node = {"num_vertices": graph.num_vertices, "depth": depth}
    if not cfg.enabled:
        return replace(res, tree=node)
    rep = detect_embedding_failure(res, graph, G, cfg.threshold, cfg.failure_sources)
    node.update(rho=rep.rho, failed=rep.failed)
    if not rep.failed or depth >= cfg.max_depth:
        return replace(res, failure=rep, tree=node)
    try:
        p1, p2 = split_patches(graph, G, cfg.overlap_margin, cfg.min_patch_size, n + 1)
    except SplitFailed as exc:
        node["split_failed"] = str(exc)
        return replace(res, failure=rep, tree=node)

    r1 = _multiscale(graph.induced(p1.vertex_ids), n, cfg, depth + 1)
    r2 = _multiscale(graph.induced(p2.vertex_ids), n, cfg, depth + 1)
    pos1 = {v: k for k, v in enumerate(p1.vertex_ids)}
    pos2 = {v: k for k, v in enumerate(p2.vertex_ids)}
    ov1 = np.array([pos1[v] for v in p1.overlap_ids])
    ov2 = np.array([pos2[v] for v in p1.overlap_ids])
    try:
        Q, t = procrustes_align(r2.coords, r1.coords, (ov2, ov1))
    except DegenerateAlignment as exc:
        node["split_failed"] = str(exc)
        return replace(res, failure=rep, tree=node)
    X2 = apply_transform(r2.coords, Q, t)
    X = np.zeros((graph.num_vertices, n))
    X[p2.vertex_ids] = X2
    X[p1.vertex_ids] = r1.coords
    X[p1.overlap_ids] = 0.5 * (r1.coords[ov1] + X2[ov2])

    merged = smacof_optimize(X, graph, cfg.smacof_tol, cfg.smacof_max_iter)
    rep2 = detect_embedding_failure(merged, graph, G, cfg.threshold, cfg.failure_sources)
    node.update(
        merged_rho=rep2.rho,
        merged_failed=rep2.failed,
        overlap=int(p1.overlap_ids.size),
        children=[r1.tree, r2.tree],
    )
    return replace(merged, failure=rep2, tree=node)
