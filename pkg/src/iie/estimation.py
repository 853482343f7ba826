"""Closed-form metric estimators.

Two settings are covered:

* clustered observations of an isotropic intrinsic GMM, where the top ``n``
  principal directions of each cluster's sample covariance give a
  maximum-likelihood estimate of ``J J^T`` (probabilistic PCA);
* a rigid sensor array, where finite differences at known offsets give the
  Jacobian by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateArray, InsufficientSamples, InvalidInput
from .metric_field import (
    JacobianEstimate,
    MetricField,
    MetricTensor,
    PointSet,
    pushforward_metric,
    pushforward_metrics,
)


@dataclass(frozen=True)
class ObservationClusters:
    """Repeated noisy observations grouped by the latent location they came from."""

    clusters: list
    sigma_int_sq: float
    sigma_obs_sq: float
    intrinsic_dim: int

    def __post_init__(self):
        cl = []
        m = None
        for cid, ys in self.clusters:
            ys = np.atleast_2d(np.asarray(ys, dtype=float))
            if ys.shape[0] == 0:
                raise InvalidInput(f"cluster {cid} is empty")
            if m is None:
                m = ys.shape[1]
            if ys.shape[1] != m:
                raise InvalidInput("all observations must have the same dimension")
            if not np.all(np.isfinite(ys)):
                raise InvalidInput(f"cluster {cid} has non-finite entries")
            ys = ys.copy()
            ys.setflags(write=False)
            cl.append((int(cid), ys))
        for s in (self.sigma_int_sq, self.sigma_obs_sq):
            if not np.isfinite(s) or s < 0:
                raise InvalidInput("noise variances must be finite and non-negative")
        object.__setattr__(self, "clusters", cl)
        object.__setattr__(self, "sigma_int_sq", float(self.sigma_int_sq))
        object.__setattr__(self, "sigma_obs_sq", float(self.sigma_obs_sq))
        object.__setattr__(self, "intrinsic_dim", int(self.intrinsic_dim))

    def __len__(self):
        return len(self.clusters)

    @property
    def m(self) -> int:
        return self.clusters[0][1].shape[1]

    @property
    def counts(self) -> np.ndarray:
        return np.array([ys.shape[0] for _, ys in self.clusters])

    def means(self) -> np.ndarray:
        return np.stack([ys.mean(axis=0) for _, ys in self.clusters])

    def covariances(self) -> np.ndarray:
        return np.stack([sample_covariance(ys) for _, ys in self.clusters])

    def observed(self) -> PointSet:
        """Cluster sample means, the observed points used downstream."""
        return PointSet(self.means())

    def subset(self, idx) -> ObservationClusters:
        return ObservationClusters(
            [self.clusters[i] for i in idx], self.sigma_int_sq, self.sigma_obs_sq, self.intrinsic_dim
        )


@dataclass(frozen=True)
class SensorArrayShot:
    """Observation at a base point plus one observation per array offset."""

    base_obs: np.ndarray
    displaced_obs: np.ndarray  # (k, m)
    offsets: np.ndarray  # (n, k)

    def __post_init__(self):
        base = np.asarray(self.base_obs, dtype=float).ravel()
        disp = np.atleast_2d(np.asarray(self.displaced_obs, dtype=float))
        U = np.atleast_2d(np.asarray(self.offsets, dtype=float))
        if disp.shape != (U.shape[1], base.size):
            raise InvalidInput(f"expected {U.shape[1]} displaced observations of dim {base.size}, got {disp.shape}")
        if U.shape[1] < U.shape[0]:
            raise DegenerateArray("array needs at least n offsets")
        for name, a in (("base_obs", base), ("displaced_obs", disp), ("offsets", U)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)


def sample_covariance(cluster) -> np.ndarray:
    """Biased (1/N) sample covariance of the rows of ``cluster``.

    Rows are put in lexicographic order first, so the result does not depend
    on the order of the samples, down to the last bit.
    """
    Y = np.atleast_2d(np.asarray(cluster, dtype=float))
    if Y.shape[0] < 1:
        raise InsufficientSamples("empty cluster")
    Y = Y[np.lexsort(Y.T[::-1])]
    d = Y - Y.mean(axis=0)
    S = d.T @ d / Y.shape[0]
    return 0.5 * (S + S.T)


def ppca_jjt(S: np.ndarray, sigma_int_sq: float, n: int) -> np.ndarray:
    """Estimate of ``J J^T`` from a sample covariance by probabilistic PCA.

    The top-``n`` eigenvalues are shrunk by the mean of the remaining ones and
    clamped at zero; dividing by the intrinsic variance converts covariance
    units into Jacobian-product units.  When ``n == m`` there are no residual
    directions and nothing is subtracted.  ``S`` may be a stack (N, m, m).
    """
    if sigma_int_sq <= 0:
        raise InvalidInput("sigma_int_sq must be positive")
    S = np.asarray(S, dtype=float)
    single = S.ndim == 2
    F = _ppca_factor(S[None] if single else S, sigma_int_sq, n)
    out = F @ F.transpose(0, 2, 1)
    return out[0] if single else out


def _ppca_factor(S, sigma_int_sq, n):
    """Rank-n factor ``F`` with ``F F^T`` the shrunk PPCA estimate, for stacked S."""
    m = S.shape[-1]
    if not 1 <= n <= m:
        raise InvalidInput(f"need 1 <= n <= m, got n={n}, m={m}")
    w, V = np.linalg.eigh(S)
    w, V = w[:, ::-1], V[:, :, ::-1]
    resid = w[:, n:].mean(axis=1, keepdims=True) if n < m else np.zeros((S.shape[0], 1))
    lam = np.maximum(w[:, :n] - resid, 0.0) / sigma_int_sq
    return V[:, :, :n] * np.sqrt(lam)[:, None, :]


def local_metric_estimate(cluster, sigma_int_sq, sigma_obs_sq, n) -> MetricTensor:
    """Push-forward metric from one cluster via its rank-``n`` PPCA factor."""
    Y = np.atleast_2d(np.asarray(cluster, dtype=float))
    if Y.shape[0] < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {Y.shape[0]}")
    if sigma_int_sq <= 0:
        raise InvalidInput("sigma_int_sq must be positive")
    F = _ppca_factor(sample_covariance(Y)[None], sigma_int_sq, n)[0]
    return pushforward_metric(JacobianEstimate(F))


def local_metric_field(clusters: ObservationClusters) -> tuple[PointSet, MetricField]:
    """Estimate the metric at every cluster mean independently."""
    if clusters.sigma_int_sq <= 0:
        raise InvalidInput("sigma_int_sq must be positive")
    counts = clusters.counts
    if counts.min() < 2:
        raise InsufficientSamples(f"every cluster needs at least 2 samples (min is {counts.min()})")
    n = clusters.intrinsic_dim
    F = _ppca_factor(clusters.covariances(), clusters.sigma_int_sq, n)
    return clusters.observed(), MetricField(pushforward_metrics(F), n)


def _array_solve(D: np.ndarray, U: np.ndarray) -> np.ndarray:
    G = U @ U.T
    if np.linalg.matrix_rank(U) < U.shape[0] or np.linalg.cond(G) > 1e12:
        raise DegenerateArray("offsets matrix is rank deficient")
    # J = D U^T (U U^T)^{-1}, solved as a linear system on the transpose
    return np.linalg.solve(G, U @ D.T).T


def array_jacobian_estimate(shot: SensorArrayShot) -> JacobianEstimate:
    """Least-squares Jacobian from finite differences at known offsets."""
    D = (shot.displaced_obs - shot.base_obs).T  # (m, k)
    return JacobianEstimate(_array_solve(D, shot.offsets))


def array_metric_field(shots) -> tuple[PointSet, MetricField]:
    """Metric at every shot's base observation."""
    if not shots:
        raise InvalidInput("no array shots")
    J = np.stack([array_jacobian_estimate(s).matrix for s in shots])
    base = np.stack([s.base_obs for s in shots])
    return PointSet(base), MetricField(pushforward_metrics(J), J.shape[2])
