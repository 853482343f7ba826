"""Ground-truth generators: intrinsic domains, observation models and samplers.

Every generator is a pure function of its parameters and a root seed.  Random
streams for independent parts of a dataset are derived from the root seed with
a fixed integer key (``_rng(seed, key)``) so that adding a stage never shifts
the numbers drawn by another.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateArray, InvalidInput
from .estimation import ObservationClusters, SensorArrayShot
from .metric_field import PointSet

# stream keys
_CENTERS, _INTRINSIC_NOISE, _OBS_NOISE, _ROTATIONS, _MODEL = 1, 2, 3, 4, 5


def _rng(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


@dataclass(frozen=True)
class ObservationModel:
    """Observation function ``f: R^n -> R^m`` with its analytic Jacobian.

    Both callables are vectorised: ``f`` maps (N, n) -> (N, m) and
    ``jacobian`` maps (N, n) -> (N, m, n).
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    m: int
    n: int
    illustrative: bool = False

    def __call__(self, x):
        return self.f(np.atleast_2d(np.asarray(x, dtype=float)))

    def jac(self, x):
        return self.jacobian(np.atleast_2d(np.asarray(x, dtype=float)))


def finite_difference_jacobian(model: ObservationModel, x, step=1e-6) -> np.ndarray:
    """Central-difference Jacobian, shape (N, m, n)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cols = []
    for a in range(model.n):
        e = np.zeros(model.n)
        e[a] = step
        cols.append((model(x + e) - model(x - e)) / (2 * step))
    return np.stack(cols, axis=2)


def check_jacobian(model: ObservationModel, domain: IntrinsicDomain | None = None, num=100, seed=0, rtol=1e-4) -> float:
    """Compare analytic and finite-difference Jacobians; raise if they disagree.

    Returns the worst relative Frobenius error.
    """
    if domain is not None:
        x = domain.sampler(num, seed).points
    else:
        x = _rng(seed, _MODEL).uniform(-0.5, 0.5, size=(num, model.n))
    Ja = model.jac(x)
    Jf = finite_difference_jacobian(model, x)
    err = np.linalg.norm(Ja - Jf, axis=(1, 2)) / np.maximum(np.linalg.norm(Ja, axis=(1, 2)), 1e-12)
    worst = float(err.max())
    if worst > rtol:
        raise InvalidInput(f"model '{model.name}': analytic Jacobian disagrees with finite differences ({worst:.3g})")
    return worst


def severed_sphere_model() -> ObservationModel:
    def f(x):
        s = np.sin(2.5 * x[:, 0])
        return np.stack([s * np.sin(x[:, 1]), s * np.cos(x[:, 1]), -np.sin(x[:, 1])], axis=1)

    def jac(x):
        s, c = np.sin(2.5 * x[:, 0]), 2.5 * np.cos(2.5 * x[:, 0])
        s2, c2 = np.sin(x[:, 1]), np.cos(x[:, 1])
        J = np.empty((x.shape[0], 3, 2))
        J[:, 0, 0] = c * s2
        J[:, 1, 0] = c * c2
        J[:, 2, 0] = 0.0
        J[:, 0, 1] = s * c2
        J[:, 1, 1] = -s * s2
        J[:, 2, 1] = -c2
        return J

    return ObservationModel("severed_sphere", f, jac, 3, 2)


def identity_model(n: int = 2) -> ObservationModel:
    def f(x):
        return x.copy()

    def jac(x):
        return np.broadcast_to(np.eye(n), (x.shape[0], n, n)).copy()

    return ObservationModel("identity", f, jac, n, n)


def linear_model(A) -> ObservationModel:
    A = np.asarray(A, dtype=float)

    def f(x):
        return x @ A.T

    def jac(x):
        return np.broadcast_to(A, (x.shape[0],) + A.shape).copy()

    return ObservationModel("linear", f, jac, A.shape[0], A.shape[1])


def rss_decay_model(anchors=((-0.6, -0.6), (0.7, -0.4), (0.0, 0.8)), height=0.3) -> ObservationModel:
    """Received signal strength from three anchors with smooth inverse-square decay.

    Illustrative only: the decay law and anchor layout are made up.
    """
    P = np.asarray(anchors, dtype=float)

    def f(x):
        r2 = ((x[:, None, :] - P[None]) ** 2).sum(-1) + height**2
        return 1.0 / r2

    def jac(x):
        d = x[:, None, :] - P[None]
        r2 = (d**2).sum(-1) + height**2
        return -2.0 * d / (r2**2)[..., None]

    return ObservationModel("rss_decay", f, jac, P.shape[0], P.shape[1], illustrative=True)


def random_trig_model(m: int = 3, n: int = 2, seed: int = 0, freq=1.5) -> ObservationModel:
    """Random smooth map ``x -> sin(W x + b) + A x``; illustrative only."""
    g = _rng(seed, _MODEL)
    W = g.normal(scale=freq, size=(m, n))
    b = g.uniform(0, 2 * np.pi, size=m)
    A = g.normal(scale=0.5, size=(m, n))

    def f(x):
        return np.sin(x @ W.T + b) + x @ A.T

    def jac(x):
        return np.cos(x @ W.T + b)[:, :, None] * W[None] + A[None]

    return ObservationModel("random_trig", f, jac, m, n, illustrative=True)


MODELS = {
    "severed_sphere": severed_sphere_model,
    "identity": identity_model,
    "linear": linear_model,
    "rss_decay": rss_decay_model,
    "random_trig": random_trig_model,
}


@dataclass(frozen=True)
class IntrinsicDomain:
    """Planar region with a vectorised membership predicate."""

    name: str
    contains: Callable[[np.ndarray], np.ndarray]
    bounding_box: tuple
    area: float | None = None
    params: dict | None = None

    @property
    def diameter(self) -> float:
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounding_box)
        return float(np.linalg.norm(hi - lo))

    def sampler(self, N: int, seed: int) -> PointSet:
        """Uniform rejection sampling from the bounding box."""
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounding_box)
        g = _rng(seed, _CENTERS)
        out = []
        have = 0
        while have < N:
            batch = g.uniform(lo, hi, size=(max(2 * (N - have), 64), lo.size))
            batch = batch[self.contains(batch)]
            out.append(batch)
            have += batch.shape[0]
        return PointSet(np.concatenate(out)[:N])


def cross_hole_square(side=1.0, cross_arm_width=0.25, cross_arm_length=0.75) -> IntrinsicDomain:
    """Square centred at the origin with a plus-shaped hole in the middle.

    Each arm of the hole spans ``cross_arm_length`` end to end and is
    ``cross_arm_width`` wide.
    """
    s, w, L = float(side), float(cross_arm_width), float(cross_arm_length)
    if not (0 < w < L < s):
        raise InvalidInput(f"need 0 < arm width < arm length < side, got {w}, {L}, {s}")

    def contains(x):
        x = np.atleast_2d(x)
        a, b = np.abs(x[:, 0]), np.abs(x[:, 1])
        in_square = (a <= s / 2) & (b <= s / 2)
        in_hole = ((a <= w / 2) & (b <= L / 2)) | ((b <= w / 2) & (a <= L / 2))
        return in_square & ~in_hole

    area = s * s - (2 * w * L - w * w)
    return IntrinsicDomain(
        "cross_hole_square", contains, ((-s / 2, -s / 2), (s / 2, s / 2)), area,
        {"side": s, "cross_arm_width": w, "cross_arm_length": L},
    )


def rectangle(width=1.0, height=0.6) -> IntrinsicDomain:
    w, h = float(width), float(height)

    def contains(x):
        x = np.atleast_2d(x)
        return (np.abs(x[:, 0]) <= w / 2) & (np.abs(x[:, 1]) <= h / 2)

    return IntrinsicDomain("rectangle", contains, ((-w / 2, -h / 2), (w / 2, h / 2)), w * h, {"width": w, "height": h})


SERPENTINE = ((0.0, 0.0), (2.0, 0.0), (2.0, 0.6), (0.0, 0.6), (0.0, 1.2), (2.0, 1.2))


def nonconvex_corridor_domain(centerline=SERPENTINE, width=0.3) -> IntrinsicDomain:
    """Corridor of constant ``width`` around a polyline (square-capped ends).

    The default centreline is a serpentine with two U-turns, so the geodesic
    between the two ends is several times their straight-line distance.
    Membership is "within width/2 of the centreline" in the max-norm around
    each axis-aligned segment, giving square corners.
    """
    C = np.asarray(centerline, dtype=float)
    h = float(width) / 2
    if h <= 0 or C.shape[0] < 2:
        raise InvalidInput("corridor needs a positive width and at least two vertices")
    lo_seg = np.minimum(C[:-1], C[1:]) - h
    hi_seg = np.maximum(C[:-1], C[1:]) + h

    def contains(x):
        x = np.atleast_2d(x)
        inside = np.zeros(x.shape[0], dtype=bool)
        for lo, hi in zip(lo_seg, hi_seg):
            inside |= np.all((x >= lo) & (x <= hi), axis=1)
        return inside

    lo, hi = lo_seg.min(axis=0), hi_seg.max(axis=0)
    return IntrinsicDomain(
        "nonconvex_corridor", contains, (tuple(lo), tuple(hi)), None,
        {"centerline": C.tolist(), "width": float(width)},
    )


DOMAINS = {
    "cross_hole_square": cross_hole_square,
    "rectangle": rectangle,
    "nonconvex_corridor": nonconvex_corridor_domain,
}


def gmm_sample_clusters(domain, model, N, N_i, sigma_int, sigma_obs, seed):
    """Sample an isotropic intrinsic GMM and observe it through ``model``.

    Returns ``(clusters, truth)`` where ``truth`` holds the intrinsic cluster
    centres.  Estimators only ever see ``clusters``.
    """
    if sigma_int < 0 or sigma_obs < 0:
        raise InvalidInput("noise levels must be non-negative")
    if N_i < 1:
        raise InvalidInput("N_i must be at least 1")
    centers = domain.sampler(N, seed)
    x = centers.points
    eps = _rng(seed, _INTRINSIC_NOISE).standard_normal((N, N_i, model.n))
    w = _rng(seed, _OBS_NOISE).standard_normal((N, N_i, model.m))
    xs = x[:, None, :] + sigma_int * eps
    ys = model(xs.reshape(-1, model.n)).reshape(N, N_i, model.m) + sigma_obs * w
    clusters = ObservationClusters(
        [(i, ys[i]) for i in range(N)], sigma_int**2, sigma_obs**2, model.n
    )
    return clusters, centers


def random_rotation(g: np.random.Generator, n: int) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    Q, R = np.linalg.qr(g.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


@dataclass(frozen=True)
class ArrayTruth:
    """Ground truth kept next to simulated array shots (never fed to estimators)."""

    points: PointSet
    rotations: np.ndarray  # (N, n, n); identity when rotation is off


DEFAULT_L_ARRAY = ((0.15, 0.0), (0.0, 0.15))  # offsets of the two arm sensors (n x k)


def sensor_array_sample(domain, model, N, offsets=DEFAULT_L_ARRAY, randomize_rotation=True, seed=0):
    """Observe ``f`` at each centre and at ``centre + R @ u_l`` for every offset.

    The returned shots carry the unrotated offsets: the estimator does not know
    each shot's orientation.
    """
    U = np.asarray(offsets, dtype=float)
    if U.ndim != 2 or U.shape[0] != model.n:
        raise InvalidInput(f"offsets must be an (n={model.n}, k) matrix, got {U.shape}")
    if np.linalg.matrix_rank(U) < model.n:
        raise DegenerateArray("sensor offsets do not span the intrinsic space")
    centers = domain.sampler(N, seed)
    x = centers.points
    if randomize_rotation:
        g = _rng(seed, _ROTATIONS)
        R = np.stack([random_rotation(g, model.n) for _ in range(N)])
    else:
        R = np.broadcast_to(np.eye(model.n), (N, model.n, model.n)).copy()
    base = model(x)
    shifted = x[:, None, :] + np.einsum("nab,bk->nka", R, U)
    disp = model(shifted.reshape(-1, model.n)).reshape(N, U.shape[1], model.m)
    shots = [SensorArrayShot(base[i], disp[i], U) for i in range(N)]
    return shots, ArrayTruth(centers, R)


@dataclass(frozen=True)
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (k, m), rows are principal directions
    explained_variance_ratio: np.ndarray

    def transform(self, Y) -> np.ndarray:
        return (np.atleast_2d(np.asarray(Y, dtype=float)) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.atleast_2d(np.asarray(Z, dtype=float)) @ self.components + self.mean


def pca_project(points, num_components: int) -> tuple[PointSet, PCABasis]:
    """Project mean-centred points onto their top principal directions."""
    Y = points.points if isinstance(points, PointSet) else np.atleast_2d(np.asarray(points, dtype=float))
    N, m = Y.shape
    if not 1 <= num_components <= min(N, m):
        raise InvalidInput(f"num_components must lie in [1, {min(N, m)}], got {num_components}")
    mu = Y.mean(axis=0)
    _, s, Vt = np.linalg.svd(Y - mu, full_matrices=False)
    # deterministic orientation: largest-magnitude loading of each axis is positive
    signs = np.sign(Vt[np.arange(Vt.shape[0]), np.argmax(np.abs(Vt), axis=1)])
    Vt = Vt * np.where(signs == 0, 1.0, signs)[:, None]
    var = s**2
    total = var.sum()
    ratio = var[:num_components] / total if total > 0 else np.zeros(num_components)
    basis = PCABasis(mu, Vt[:num_components], ratio)
    return PointSet(basis.transform(Y)), basis
