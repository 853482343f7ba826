import numpy as np
import pytest
from scipy import stats
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from iie.errors import DegenerateArray, InvalidInput
from iie.estimation import array_metric_field
from iie.worlds import (
    DEFAULT_L_ARRAY,
    DOMAINS,
    MODELS,
    check_jacobian,
    cross_hole_square,
    gmm_sample_clusters,
    identity_model,
    linear_model,
    nonconvex_corridor_domain,
    pca_project,
    random_trig_model,
    rectangle,
    rss_decay_model,
    sensor_array_sample,
    severed_sphere_model,
)


@pytest.mark.parametrize(
    "model",
    [severed_sphere_model(), identity_model(), linear_model([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]),
     rss_decay_model(), random_trig_model()],
    ids=lambda m: m.name,
)
def test_models_pass_jacobian_gate(model):
    assert check_jacobian(model, cross_hole_square(), num=100, seed=0) < 1e-4


def test_severed_sphere_formula():
    f = severed_sphere_model()
    np.testing.assert_allclose(f([0.0, np.pi / 2])[0], [0.0, 0.0, -1.0], atol=1e-15)
    x = np.array([[0.2, -0.4]])
    a, b = x[0]
    expected = [np.sin(2.5 * a) * np.sin(b), np.sin(2.5 * a) * np.cos(b), -np.sin(b)]
    np.testing.assert_allclose(f(x)[0], expected, rtol=1e-15)


def test_severed_sphere_is_injective_on_the_domain():
    # the map folds where cos(2.5 x1) = 0; the domain must stay inside that
    dom = cross_hole_square()
    f = severed_sphere_model()
    X = dom.sampler(2000, 0).points
    s = np.linalg.svd(f.jac(X), compute_uv=False)
    assert s.min() > 0.05


def test_cross_hole_membership_and_area():
    dom = cross_hole_square()
    assert not dom.contains(np.array([[0.0, 0.0]]))[0]
    assert dom.contains(np.array([[0.5, 0.5]]))[0]
    assert not dom.contains(np.array([[0.3, 0.05]]))[0]  # inside a horizontal arm
    g = np.random.default_rng(0)
    lo, hi = (np.asarray(b) for b in dom.bounding_box)
    U = g.uniform(lo, hi, size=(1_000_000, 2))
    mc = dom.contains(U).mean() * np.prod(hi - lo)
    assert mc == pytest.approx(dom.area, rel=0.01)


def test_cross_hole_rejects_bad_dimensions():
    with pytest.raises(InvalidInput):
        cross_hole_square(side=1.0, cross_arm_width=0.5, cross_arm_length=0.4)
    with pytest.raises(InvalidInput):
        cross_hole_square(side=1.0, cross_arm_width=0.2, cross_arm_length=1.2)


def test_sampler_respects_domain_and_seed():
    for make in DOMAINS.values():
        dom = make()
        a = dom.sampler(500, 7).points
        assert np.all(dom.contains(a))
        assert np.array_equal(a, dom.sampler(500, 7).points)
        assert not np.array_equal(a, dom.sampler(500, 8).points)


def test_rectangle_diameter():
    assert rectangle(3.0, 4.0).diameter == pytest.approx(5.0)


def _grid_geodesic(dom, a, b, h=0.01):
    """Shortest path on an 8-connected grid restricted to the domain."""
    lo, hi = (np.asarray(v) for v in dom.bounding_box)
    xs = np.arange(lo[0], hi[0] + h / 2, h)
    ys = np.arange(lo[1], hi[1] + h / 2, h)
    G = np.stack(np.meshgrid(xs, ys, indexing="ij"), -1).reshape(-1, 2)
    inside = dom.contains(G)
    idx = -np.ones(len(G), dtype=int)
    idx[inside] = np.arange(inside.sum())
    shape = (len(xs), len(ys))
    rows, cols, w = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        I, J = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
        I2, J2 = I + di, J + dj
        ok = (I2 >= 0) & (I2 < shape[0]) & (J2 >= 0) & (J2 < shape[1])
        u = np.ravel_multi_index((I[ok], J[ok]), shape)
        v = np.ravel_multi_index((I2[ok], J2[ok]), shape)
        both = inside[u] & inside[v]
        rows.append(idx[u[both]])
        cols.append(idx[v[both]])
        w.append(np.full(both.sum(), h * np.hypot(di, dj)))
    n = inside.sum()
    A = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    pts = G[inside]
    ia = int(np.argmin(np.linalg.norm(pts - a, axis=1)))
    ib = int(np.argmin(np.linalg.norm(pts - b, axis=1)))
    return dijkstra(A, directed=False, indices=ia)[ib]


def test_corridor_is_highly_nonconvex():
    dom = nonconvex_corridor_domain()
    C = np.asarray(dom.params["centerline"])
    a, b = C[0], C[-1]
    geo = _grid_geodesic(dom, a, b)
    assert np.isfinite(geo)
    assert geo / np.linalg.norm(b - a) > 2


def test_corridor_membership():
    dom = nonconvex_corridor_domain()
    inside = np.array([[1.0, 0.0], [2.0, 0.3], [0.0, 0.9], [1.0, 1.2], [1.0, 0.6]])
    outside = np.array([[1.0, 0.3], [1.0, 0.9], [2.5, 0.0], [-0.3, 0.0], [2.0, 0.9]])
    assert np.all(dom.contains(inside))
    assert not np.any(dom.contains(outside))


def test_corridor_sampler_uniformity():
    dom = nonconvex_corridor_domain()
    X = dom.sampler(20_000, 3).points
    # 0.1 x 0.1 cells lying entirely inside the corridor
    h = 0.1
    lo = np.asarray(dom.bounding_box[0])
    cells = np.floor((X - lo) / h).astype(int)
    keys, counts = np.unique(cells, axis=0, return_counts=True)
    corners = np.array([[0, 0], [1, 0], [0, 1], [1, 1]]) * (h - 1e-9)
    full = np.array([np.all(dom.contains(lo + k * h + corners)) for k in keys])
    obs = counts[full]
    _, p = stats.chisquare(obs)
    assert p > 0.01


def test_gmm_noise_free_clusters_are_constant():
    f = severed_sphere_model()
    clusters, truth = gmm_sample_clusters(cross_hole_square(), f, 20, 3, 0.0, 0.0, 0)
    for cid, ys in clusters.clusters:
        np.testing.assert_array_equal(ys, np.repeat(f(truth.points[cid]), 3, axis=0))


def test_gmm_intrinsic_scatter_matches_sigma():
    clusters, truth = gmm_sample_clusters(cross_hole_square(), identity_model(), 4, 10_000, 0.03, 0.0, 1)
    for cid, ys in clusters.clusters:
        sd = (ys - truth.points[cid]).std(axis=0)
        np.testing.assert_allclose(sd, 0.03, rtol=0.05)


def test_gmm_is_deterministic():
    args = (cross_hole_square(), severed_sphere_model(), 50, 5, 0.03, 0.03)
    a, ta = gmm_sample_clusters(*args, seed=11)
    b, tb = gmm_sample_clusters(*args, seed=11)
    assert np.array_equal(ta.points, tb.points)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.clusters, b.clusters))


def test_gmm_defaults_and_noise_validation():
    clusters, truth = gmm_sample_clusters(cross_hole_square(), severed_sphere_model(), 1000, 5, 0.03, 0.03, 0)
    assert len(clusters) == 1000 and clusters.sigma_int_sq == pytest.approx(0.03**2)
    with pytest.raises(InvalidInput):
        gmm_sample_clusters(cross_hole_square(), severed_sphere_model(), 10, 5, -0.1, 0.03, 0)


def test_sensor_array_linear_model_recovers_jacobian():
    A = np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]])
    shots, _ = sensor_array_sample(cross_hole_square(), linear_model(A), 20, randomize_rotation=False, seed=0)
    _, field = array_metric_field(shots)
    M = np.linalg.pinv(A @ A.T)
    for T in field.tensors:
        np.testing.assert_allclose(T, M, rtol=1e-9, atol=1e-12)


def test_sensor_array_rejects_degenerate_offsets():
    with pytest.raises(DegenerateArray):
        sensor_array_sample(cross_hole_square(), severed_sphere_model(), 5, offsets=((0.1, 0.2), (0.05, 0.1)))


def test_sensor_array_defaults_and_stored_offsets():
    assert np.array_equal(np.asarray(DEFAULT_L_ARRAY), [[0.15, 0.0], [0.0, 0.15]])
    shots, truth = sensor_array_sample(cross_hole_square(), severed_sphere_model(), 10, seed=2)
    f = severed_sphere_model()
    for s, x, R in zip(shots, truth.points.points, truth.rotations):
        np.testing.assert_array_equal(s.offsets, np.asarray(DEFAULT_L_ARRAY))
        np.testing.assert_allclose(s.displaced_obs, f(x + (R @ s.offsets).T), rtol=1e-15)
        np.testing.assert_allclose(R.T @ R, np.eye(2), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_pca_project_examples():
    g = np.random.default_rng(0)
    basis2 = np.linalg.qr(g.standard_normal((5, 2)))[0]
    Y = g.standard_normal((100, 2)) @ basis2.T + 3.0
    Z, b = pca_project(Y, 2)
    np.testing.assert_allclose(b.inverse_transform(Z.points), Y, atol=1e-10)
    W = g.standard_normal((60, 4))
    Z, b = pca_project(W, 4)
    np.testing.assert_allclose(b.inverse_transform(Z.points), W, atol=1e-10)
    r = pca_project(W, 3)[1].explained_variance_ratio
    assert r.sum() <= 1 + 1e-12 and np.all(np.diff(r) <= 0)
    with pytest.raises(InvalidInput):
        pca_project(W, 5)


def test_model_registry_rejects_unknown_parameters():
    with pytest.raises(TypeError):
        MODELS["severed_sphere"](bogus=1)
