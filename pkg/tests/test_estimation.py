import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iie.errors import DegenerateArray, InsufficientSamples, InvalidInput
from iie.estimation import (
    ObservationClusters,
    SensorArrayShot,
    array_jacobian_estimate,
    array_metric_field,
    local_metric_estimate,
    local_metric_field,
    ppca_jjt,
    sample_covariance,
)
from iie.metric_field import pushforward_metrics
from iie.worlds import (
    cross_hole_square,
    gmm_sample_clusters,
    identity_model,
    linear_model,
    random_trig_model,
    sensor_array_sample,
    severed_sphere_model,
)


def rel_fro(A, B):
    return np.linalg.norm(A - B, axis=(-2, -1)) / np.linalg.norm(B, axis=(-2, -1))


def random_orthogonal(g, n):
    q, r = np.linalg.qr(g.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------- clusters


def test_cluster_validation():
    with pytest.raises(InvalidInput):
        ObservationClusters([(0, np.zeros((0, 2)))], 1.0, 1.0, 1)
    with pytest.raises(InvalidInput):
        ObservationClusters([(0, np.zeros((2, 2))), (1, np.zeros((2, 3)))], 1.0, 1.0, 1)
    with pytest.raises(InvalidInput):
        ObservationClusters([(0, np.zeros((2, 2)))], -1.0, 1.0, 1)


def test_sample_covariance_uses_biased_normalization():
    Y = np.random.default_rng(0).standard_normal((7, 3))
    np.testing.assert_allclose(sample_covariance(Y), np.cov(Y.T, bias=True), rtol=1e-12, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 5))
def test_sample_covariance_is_symmetric_psd(seed, N, m):
    Y = np.random.default_rng(seed).standard_normal((N, m)) * 10.0 ** np.random.default_rng(seed).integers(-3, 3)
    S = sample_covariance(Y)
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-10 * max(np.trace(S), 1e-300)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_local_estimate_invariant_to_member_order(seed):
    g = np.random.default_rng(seed)
    Y = g.standard_normal((12, 3)) * [1.0, 0.5, 0.05]
    perm = g.permutation(12)
    a = local_metric_estimate(Y, 0.03**2, 0.03**2, 2).matrix
    b = local_metric_estimate(Y[perm], 0.03**2, 0.03**2, 2).matrix
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- local PPCA estimator


def test_ppca_hand_example():
    # eigenvalues 5, 3, 1 along the axes; n=2 subtracts the tail mean 1
    S = np.diag([5.0, 3.0, 1.0])
    np.testing.assert_allclose(ppca_jjt(S, 2.0, 2), np.diag([2.0, 1.0, 0.0]), atol=1e-14)


def test_ppca_clamps_negative_shrinkage():
    S = np.diag([1.0, 1.0, 1.0, 5.0])
    out = ppca_jjt(S, 1.0, 3)
    assert np.linalg.eigvalsh(out).min() >= -1e-14


def test_local_estimate_identity_jacobian_large_sample():
    sigma = 0.03
    clusters, _ = gmm_sample_clusters(cross_hole_square(), identity_model(), 1, 10_000, sigma, 0.0, 0)
    S = sample_covariance(clusters.clusters[0][1])
    np.testing.assert_allclose(ppca_jjt(S, sigma**2, 2), np.eye(2), atol=0.05)


def _local_error(N, N_i, seed=0):
    clusters, truth = gmm_sample_clusters(cross_hole_square(), severed_sphere_model(), N, N_i, 0.03, 0.03, seed)
    _, field = local_metric_field(clusters)
    Mt = pushforward_metrics(severed_sphere_model().jac(truth.points))
    return np.median(rel_fro(field.tensors, Mt))


@pytest.mark.xfail(strict=True, reason="sampling-limited: about 21% at N_i=200 with sigma_int = sigma_obs = 0.03")
def test_local_estimate_severed_sphere_dense_sampling():
    assert _local_error(1000, 200) < 0.15


def test_local_estimate_exact_on_population_covariance():
    f = severed_sphere_model()
    X = cross_hole_square().sampler(200, 0).points
    JJt = f.jac(X) @ f.jac(X).transpose(0, 2, 1)
    C = 0.03**2 * JJt + 0.03**2 * np.eye(3)
    assert rel_fro(ppca_jjt(C, 0.03**2, 2), JJt).max() < 1e-10


def test_local_estimate_error_is_sampling_limited():
    # median error falls like N_i^(-1/2): tenfold more samples, about 3.2x smaller error
    e200, e2000 = _local_error(300, 200), _local_error(300, 2000)
    assert 2.5 < e200 / e2000 < 4.0


def test_local_estimate_errors():
    with pytest.raises(InsufficientSamples):
        local_metric_estimate(np.zeros((1, 3)), 1.0, 1.0, 2)
    with pytest.raises(InvalidInput):
        local_metric_estimate(np.random.default_rng(0).standard_normal((5, 3)), 0.0, 1.0, 2)
    clusters = ObservationClusters([(0, np.zeros((1, 3))), (1, np.ones((4, 3)))], 1.0, 1.0, 2)
    with pytest.raises(InsufficientSamples):
        local_metric_field(clusters)


def test_local_estimate_converges_with_cluster_size():
    A = np.array([[1.0, 0.3], [-0.4, 1.2], [0.5, 0.5]])
    model = linear_model(A)
    target = A @ A.T
    errs = []
    for N_i in (100, 1000, 10_000):
        clusters, _ = gmm_sample_clusters(cross_hole_square(), model, 20, N_i, 0.03, 0.0, 4)
        est = ppca_jjt(clusters.covariances(), 0.03**2, 2)
        errs.append(np.median(rel_fro(est, target)))
    assert errs[0] > errs[1] > errs[2]


# ---------------------------------------------------------------- sensor array


def test_array_exact_for_linear_model():
    A = np.array([[2.0, -1.0], [0.5, 0.25], [1.0, 3.0]])
    U = np.array([[0.15, 0.0, -0.1], [0.0, 0.15, 0.05]])
    x = np.array([0.2, -0.1])
    shot = SensorArrayShot(A @ x, (A @ (x[:, None] + U)).T, U)
    np.testing.assert_allclose(array_jacobian_estimate(shot).matrix, A, rtol=1e-12, atol=1e-12)


def test_array_rejects_rank_deficient_offsets():
    U = np.array([[0.1, 0.2], [0.05, 0.1]])
    shot = SensorArrayShot(np.zeros(3), np.zeros((2, 3)), U)
    with pytest.raises(DegenerateArray):
        array_jacobian_estimate(shot)
    with pytest.raises(DegenerateArray):
        SensorArrayShot(np.zeros(3), np.zeros((1, 3)), np.ones((2, 1)))


def _world_frame(shot, R):
    return SensorArrayShot(shot.base_obs, shot.displaced_obs, R @ shot.offsets)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_array_metric_invariant_to_offset_rotation(seed):
    # same physical measurement, offsets described in the body or world frame
    g = np.random.default_rng(seed)
    model = random_trig_model(m=4, n=2, seed=seed % 7)
    x = g.uniform(-0.4, 0.4, 2)
    U = g.standard_normal((2, 3)) * 0.1
    R = random_orthogonal(g, 2)
    base = model(x)[0]
    disp = model(x + (R @ U).T)
    body = SensorArrayShot(base, disp, U)
    M_body = pushforward_metrics(array_jacobian_estimate(body).matrix[None])[0]
    M_world = pushforward_metrics(array_jacobian_estimate(_world_frame(body, R)).matrix[None])[0]
    assert rel_fro(M_body, M_world) < 1e-8


def test_array_rotated_shots_match_world_frame_estimates():
    model = severed_sphere_model()
    shots, truth = sensor_array_sample(cross_hole_square(), model, 100, seed=5)
    _, F_body = array_metric_field(shots)
    _, F_world = array_metric_field([_world_frame(s, R) for s, R in zip(shots, truth.rotations)])
    assert rel_fro(F_body.tensors, F_world.tensors).max() < 1e-8


def _array_error(spacing, seed=0):
    model = severed_sphere_model()
    shots, truth = sensor_array_sample(cross_hole_square(), model, 500, ((spacing, 0.0), (0.0, spacing)), True, seed)
    _, field = array_metric_field(shots)
    return np.median(rel_fro(field.tensors, pushforward_metrics(model.jac(truth.points.points))))


def test_array_error_shrinks_linearly_with_spacing():
    e = [_array_error(h) for h in (0.2, 0.1, 0.05, 0.025)]
    assert all(a > b for a, b in zip(e, e[1:]))
    # first-order Taylor remainder: halving the spacing roughly halves the error
    for a, b in zip(e[1:], e[2:]):
        assert 1.6 < a / b < 2.6
    assert _array_error(0.05) < 0.10


@pytest.mark.xfail(strict=True, reason="first-order array estimate is about 24% off at 0.15 spacing on this map")
def test_array_default_spacing_within_ten_percent():
    assert _array_error(0.15) < 0.10
