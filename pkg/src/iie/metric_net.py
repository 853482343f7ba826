"""Smooth Jacobian regressor trained by maximum likelihood.

A small feed-forward network ``J(y | theta)`` (two sigmoid hidden layers and a
linear head) predicts an ``m x n`` Jacobian at each observed point.  Each
cluster of repeated observations is modelled as a Gaussian with covariance
``C = s_int^2 J J^T + s_obs^2 I``; the weights maximise the resulting
log-likelihood minus a weight-decay penalty.  Gradients are back-propagated by
hand, so only numpy is required.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import IllConditioned, InvalidInput, TrainingDiverged
from .estimation import ObservationClusters
from .metric_field import JacobianEstimate, MetricField, PointSet, pushforward_metrics

LOG2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class NetParams:
    weights: tuple  # (h1 x m), (h2 x h1), (m*n x h2)
    biases: tuple  # (h1,), (h2,), (m*n,)
    m: int
    n: int

    def __post_init__(self):
        W = tuple(np.array(w, dtype=float) for w in self.weights)
        b = tuple(np.array(v, dtype=float).ravel() for v in self.biases)
        if len(W) != 3 or len(b) != 3:
            raise InvalidInput("network must have two hidden layers and one linear output layer")
        shapes_in = (self.m, W[0].shape[0], W[1].shape[0])
        for k in range(3):
            if W[k].ndim != 2 or W[k].shape[1] != shapes_in[k] or b[k].shape != (W[k].shape[0],):
                raise InvalidInput(f"layer {k} has inconsistent shapes {W[k].shape}, {b[k].shape}")
        if W[2].shape[0] != self.m * self.n:
            raise InvalidInput(f"output layer must have m*n={self.m * self.n} units")
        for a in W + b:
            if not np.all(np.isfinite(a)):
                raise InvalidInput("network parameters must be finite")
            a.setflags(write=False)
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)

    @property
    def hidden(self) -> tuple:
        return (self.weights[0].shape[0], self.weights[1].shape[0])

    @property
    def num_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(v.size for v in self.biases)

    def arrays(self) -> list:
        return list(self.weights) + list(self.biases)

    @classmethod
    def from_arrays(cls, arrays, m, n) -> NetParams:
        return cls(tuple(arrays[:3]), tuple(arrays[3:]), m, n)

    def to_dict(self) -> dict:
        return {
            "architecture": {"input_dim": self.m, "hidden": list(self.hidden), "output": [self.m, self.n]},
            "weights": [{"shape": list(w.shape), "data": w.ravel().tolist()} for w in self.weights],
            "biases": [v.tolist() for v in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> NetParams:
        arch = d["architecture"]
        W = [np.asarray(w["data"], dtype=float).reshape(w["shape"]) for w in d["weights"]]
        b = [np.asarray(v, dtype=float) for v in d["biases"]]
        m, n = arch["output"]
        return cls(tuple(W), tuple(b), int(m), int(n))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 1e-3
    max_epochs: int = 3000
    batch: int | None = None  # clusters per step; None = full batch
    seed: int = 0
    holdout_fraction: float = 0.2
    hidden: tuple = (16, 16)
    patience: int | None = 300
    folds: int = 5
    early_stopping: bool = True  # False: keep the final epoch instead of the best-validation snapshot

    def __post_init__(self):
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise InvalidInput("ADAM betas must lie in (0, 1)")
        if not 0 < self.holdout_fraction < 1:
            raise InvalidInput("holdout_fraction must lie in (0, 1)")
        if self.weight_decay < 0 or self.learning_rate <= 0 or self.max_epochs < 0:
            raise InvalidInput("invalid training hyper-parameters")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def sigmoid(z):
    # numerically safe for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _forward(Y, p: NetParams):
    W1, W2, W3 = p.weights
    b1, b2, b3 = p.biases
    a1 = sigmoid(Y @ W1.T + b1)
    a2 = sigmoid(a1 @ W2.T + b2)
    out = a2 @ W3.T + b3
    return out.reshape(-1, p.m, p.n), (Y, a1, a2)


def net_forward(y, params: NetParams) -> JacobianEstimate:
    y = np.asarray(y, dtype=float).ravel()
    if y.size != params.m:
        raise InvalidInput(f"input has dimension {y.size}, network expects {params.m}")
    J, _ = _forward(y[None], params)
    return JacobianEstimate(J[0])


def net_jacobians(Y, params: NetParams) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != params.m:
        raise InvalidInput(f"inputs have dimension {Y.shape[1]}, network expects {params.m}")
    return _forward(Y, params)[0]


def net_metric_field(params: NetParams, observed: PointSet) -> MetricField:
    return MetricField(pushforward_metrics(net_jacobians(observed.points, params)), params.n)


def lipschitz_bound(params: NetParams) -> float:
    """Upper bound on the Lipschitz constant of ``y -> vec(J(y))``.

    Sigmoid slopes never exceed 1/4, so the product of layer spectral norms
    times 1/16 bounds the composition.
    """
    return float(np.prod([np.linalg.norm(w, 2) for w in params.weights]) / 16.0)


def model_covariance(jac, sigma_int_sq, sigma_obs_sq) -> np.ndarray:
    """``s_int^2 J J^T + s_obs^2 I``; accepts one Jacobian or a stack."""
    if sigma_obs_sq <= 0:
        raise InvalidInput("sigma_obs_sq must be positive for an invertible covariance")
    J = jac.matrix if isinstance(jac, JacobianEstimate) else np.asarray(jac, dtype=float)
    C = sigma_int_sq * (J @ np.swapaxes(J, -1, -2))
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    return C + sigma_obs_sq * np.eye(J.shape[-2])


@dataclass(frozen=True)
class ClusterStats:
    """Sufficient statistics of a set of clusters: means, covariances and counts."""

    means: np.ndarray
    covs: np.ndarray
    counts: np.ndarray
    sigma_int_sq: float
    sigma_obs_sq: float
    intrinsic_dim: int

    @classmethod
    def of(cls, clusters: ObservationClusters) -> ClusterStats:
        return cls(clusters.means(), clusters.covariances(), clusters.counts.astype(float),
                   clusters.sigma_int_sq, clusters.sigma_obs_sq, clusters.intrinsic_dim)

    def subset(self, idx) -> ClusterStats:
        idx = np.asarray(idx, dtype=int)
        return replace(self, means=self.means[idx], covs=self.covs[idx], counts=self.counts[idx])

    def __len__(self):
        return self.counts.size

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def _stats(clusters) -> ClusterStats:
    return clusters if isinstance(clusters, ClusterStats) else ClusterStats.of(clusters)


def _chol(C):
    """Batched Cholesky with one ridge retry for the clusters that fail."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(C)
    eye = np.eye(C.shape[-1])
    for k in range(C.shape[0]):
        try:
            L[k] = np.linalg.cholesky(C[k])
        except np.linalg.LinAlgError:
            try:
                L[k] = np.linalg.cholesky(C[k] + 1e-10 * np.trace(C[k]) * eye)
            except np.linalg.LinAlgError:
                raise IllConditioned(f"model covariance of cluster {k} is not positive definite") from None
    return L


def _loglik_terms(st: ClusterStats, J):
    """Per-cluster log-likelihoods and the gradient of the total w.r.t. each J."""
    if st.sigma_obs_sq <= 0:
        raise InvalidInput("sigma_obs_sq must be positive for an invertible covariance")
    m = J.shape[1]
    C = model_covariance(J, st.sigma_int_sq, st.sigma_obs_sq)
    L = _chol(C)
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(m), C.shape))
    Cinv = np.swapaxes(Linv, 1, 2) @ Linv
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    CiS = Cinv @ st.covs
    tr = np.trace(CiS, axis1=1, axis2=2)
    ll = -0.5 * st.counts * (m * LOG2PI + logdet + tr)
    if not np.all(np.isfinite(ll)):
        raise IllConditioned("non-finite log-likelihood term")
    # dLL/dC = -N/2 (C^-1 - C^-1 S C^-1);  dLL/dJ = 2 s_int^2 (dLL/dC) J
    G = -0.5 * st.counts[:, None, None] * (Cinv - CiS @ Cinv)
    G = 0.5 * (G + np.swapaxes(G, 1, 2))
    dJ = 2.0 * st.sigma_int_sq * (G @ J)
    return ll, dJ


def net_loglikelihood(clusters, params: NetParams) -> float:
    """Gaussian log-likelihood of the clusters with the network's covariances."""
    st = _stats(clusters)
    J, _ = _forward(st.means, params)
    ll, _ = _loglik_terms(st, J)
    return float(ll.sum())


def kl_objective(clusters, params: NetParams) -> float:
    """``-sum_i N_i KL(N(0, S_i) || N(0, C_i))`` for the network's covariances.

    This is the direction in which the divergence carries ``Tr(C^-1 S)``, so
    it differs from the log-likelihood by ``-1/2 sum N_i (m ln 2pi + m + ln|S_i|)``,
    a constant in the parameters.  Every ``S_i`` must be full rank.
    """
    st = _stats(clusters)
    J, _ = _forward(st.means, params)
    C = model_covariance(J, st.sigma_int_sq, st.sigma_obs_sq)
    m = C.shape[-1]
    _, ld_C = np.linalg.slogdet(C)
    sgn, ld_S = np.linalg.slogdet(st.covs)
    if np.any(sgn <= 0):
        raise InvalidInput("every sample covariance must be full rank")
    tr = np.trace(np.linalg.solve(C, st.covs), axis1=1, axis2=2)
    kl = 0.5 * (ld_C - ld_S + tr - m)
    return float(-(st.counts * kl).sum())


def _backprop(params: NetParams, cache, dJ):
    Y, a1, a2 = cache
    W1, W2, W3 = params.weights
    g3 = dJ.reshape(dJ.shape[0], -1)
    gW3 = g3.T @ a2
    gb3 = g3.sum(axis=0)
    d2 = (g3 @ W3) * a2 * (1 - a2)
    gW2 = d2.T @ a1
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ W2) * a1 * (1 - a1)
    gW1 = d1.T @ Y
    gb1 = d1.sum(axis=0)
    return [gW1, gW2, gW3, gb1, gb2, gb3]


def _objective_and_grad(st: ClusterStats, params: NetParams, weight_decay):
    J, cache = _forward(st.means, params)
    ll, dJ = _loglik_terms(st, J)
    grads = _backprop(params, cache, dJ)
    penalty = weight_decay * sum(float((w * w).sum()) for w in params.weights)
    for k in range(3):
        grads[k] = grads[k] - 2.0 * weight_decay * params.weights[k]
    return float(ll.sum()) - penalty, grads


def net_gradient(clusters, params: NetParams, weight_decay: float = 0.0) -> NetParams:
    """Gradient of ``loglik - weight_decay * sum |W|^2`` (biases are not penalised)."""
    _, grads = _objective_and_grad(_stats(clusters), params, weight_decay)
    return NetParams.from_arrays(grads, params.m, params.n)


def penalized_objective(clusters, params: NetParams, weight_decay: float = 0.0) -> float:
    return net_loglikelihood(clusters, params) - weight_decay * sum(float((w * w).sum()) for w in params.weights)


def init_params(m, n, hidden, seed, inputs=None) -> NetParams:
    """Random initial weights; the first layer is scaled to the input spread.

    With ``inputs`` the first layer sees standardised data at initialisation
    (folded into ``W1`` and ``b1`` so the architecture is unchanged).
    """
    g = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 11]))
    h1, h2 = hidden
    W1 = g.normal(size=(h1, m)) / math.sqrt(m)
    b1 = np.zeros(h1)
    if inputs is not None:
        mu = inputs.mean(axis=0)
        sd = inputs.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        W1 = W1 / sd
        b1 = b1 - W1 @ mu
    W2 = g.normal(size=(h2, h1)) * 2.0 / math.sqrt(h1)
    b2 = -0.5 * W2.sum(axis=1)  # centre the second pre-activation
    W3 = g.normal(size=(m * n, h2)) * 2.0 / math.sqrt(h2)
    b3 = -0.5 * W3.sum(axis=1)
    return NetParams((W1, W2, W3), (b1, b2, b3), m, n)


class Adam:
    """ADAM for gradient *ascent* over a list of arrays."""

    def __init__(self, shapes, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            out.append(p + self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps))
        return out


@dataclass(frozen=True)
class TrainResult:
    params: NetParams
    curve: tuple  # (epoch, train_ll, val_ll) with per-observation log-likelihoods
    best_epoch: int
    best_val_ll: float
    train_idx: np.ndarray = field(repr=False)
    val_idx: np.ndarray = field(repr=False)


def holdout_split(num_clusters, fraction, seed, fold=0):
    g = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), 12, fold]))
    perm = g.permutation(num_clusters)
    nv = max(1, int(round(fraction * num_clusters)))
    nv = min(nv, num_clusters - 1)
    return np.sort(perm[nv:]), np.sort(perm[:nv])


def train_metric_net(clusters, config: TrainConfig = TrainConfig(), split=None, init: NetParams | None = None) -> TrainResult:
    """ADAM ascent on the penalised likelihood with a cluster-level holdout.

    Returns the parameters from the epoch with the best validation
    log-likelihood (or the last epoch when early stopping is off).  Curve values are log-likelihoods per observation so the
    train and validation columns are comparable.
    """
    st = _stats(clusters)
    N = len(st)
    if N < 2:
        raise InvalidInput("need at least two clusters")
    m, n = st.means.shape[1], st.intrinsic_dim
    tr_idx, va_idx = split if split is not None else holdout_split(N, config.holdout_fraction, config.seed)
    tr, va = st.subset(tr_idx), st.subset(va_idx)
    params = init or init_params(m, n, config.hidden, config.seed, tr.means)
    arrays = params.arrays()
    opt = Adam([a.shape for a in arrays], config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
    g = np.random.default_rng(np.random.SeedSequence([int(config.seed) & (2**64 - 1), 13]))
    batch = config.batch if config.batch and config.batch < len(tr) else None

    def evaluate(p):
        return net_loglikelihood(tr, p) / tr.total, net_loglikelihood(va, p) / va.total

    best = (-np.inf, 0, params)
    curve = []
    since = 0
    for epoch in range(config.max_epochs + 1):
        p = NetParams.from_arrays(arrays, m, n)
        try:
            tll, vll = evaluate(p)
        except IllConditioned as exc:
            raise TrainingDiverged(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
        if not (np.isfinite(tll) and np.isfinite(vll)):
            raise TrainingDiverged(epoch)
        curve.append((epoch, tll, vll))
        if vll > best[0]:
            best, since = (vll, epoch, p), 0
        else:
            since += 1
        if epoch == config.max_epochs or (config.early_stopping and config.patience and since >= config.patience):
            break
        order = g.permutation(len(tr)) if batch else None
        for start in range(0, len(tr), batch or len(tr)):
            part = tr if batch is None else tr.subset(order[start:start + batch])
            scale = 1.0 if batch is None else len(part) / len(tr)
            try:
                _, grads = _objective_and_grad(part, NetParams.from_arrays(arrays, m, n), config.weight_decay * scale)
            except IllConditioned as exc:
                raise TrainingDiverged(epoch, f"training diverged at epoch {epoch}: {exc}") from exc
            arrays = opt.step(arrays, grads)
            if not all(np.all(np.isfinite(a)) for a in arrays):
                raise TrainingDiverged(epoch)
    if not config.early_stopping:
        best = (vll, epoch, p)
    return TrainResult(best[2], tuple(curve), best[1], float(best[0]), tr_idx, va_idx)


@dataclass(frozen=True)
class CVResult:
    best: tuple  # (hidden, weight_decay)
    scores: list  # dicts with hidden, weight_decay, mean_val_ll, fold scores, failed


def cross_validate(clusters, grid, config: TrainConfig = TrainConfig()) -> CVResult:
    """Pick (hidden widths, weight decay) by mean validation log-likelihood.

    Folds are independent random 80/20 cluster splits drawn from the config
    seed, shared by every candidate.  Ties go to fewer parameters, then to the
    smaller weight decay.  A candidate whose training diverges scores -inf.
    """
    grid = [(tuple(h), float(lam)) for h, lam in grid]
    if not grid:
        raise InvalidInput("empty hyper-parameter grid")
    st = _stats(clusters)
    m, n = st.means.shape[1], st.intrinsic_dim
    splits = [holdout_split(len(st), config.holdout_fraction, config.seed, fold) for fold in range(config.folds)]
    scores = []
    for hidden, lam in grid:
        cfg = replace(config, hidden=hidden, weight_decay=lam)
        folds = []
        failed = False
        for split in splits:
            try:
                res = train_metric_net(st, cfg, split=split)
                folds.append(res.best_val_ll)
            except (TrainingDiverged, IllConditioned):
                failed = True
                break
        mean = float(np.mean(folds)) if not failed else -math.inf
        nparams = hidden[0] * (m + 1) + hidden[1] * (hidden[0] + 1) + m * n * (hidden[1] + 1)
        scores.append({"hidden": list(hidden), "weight_decay": lam, "mean_val_ll": mean,
                       "fold_val_ll": folds, "failed": failed, "num_params": nparams})
    ranked = sorted(range(len(grid)), key=lambda k: (-scores[k]["mean_val_ll"], scores[k]["num_params"], grid[k][1]))
    return CVResult(grid[ranked[0]], scores)


DEFAULT_GRID = [((h, h), lam) for h in (16, 32, 64) for lam in (1e-4, 1e-3, 1e-2)]


def train_config_from_dict(d) -> TrainConfig:
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(d) - known
    if unknown:
        raise InvalidInput(f"unknown training options: {sorted(unknown)}")
    return TrainConfig(**d)


def train_config_to_dict(c: TrainConfig) -> dict:
    d = asdict(c)
    d["hidden"] = list(c.hidden)
    return d
