"""Intrinsic-isometric manifold learning.

Recovers the Euclidean layout of a low-dimensional latent space from
observations through an unknown smooth map, using push-forward metric
estimates, intrinsic Isomap, weighted SMACOF and a multi-scale patch scheme.

Submodules are imported lazily so the CLI can configure thread limits before
numpy is loaded.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "metric_field": (
        "PointSet", "JacobianEstimate", "MetricTensor", "MetricField", "DistanceGraph",
        "pushforward_metric", "pushforward_metrics", "approx_intrinsic_sq_distance",
        "build_knn_graph", "euclidean_knn_graph", "geodesic_all_pairs", "intrinsic_path_length",
    ),
    "estimation": (
        "ObservationClusters", "SensorArrayShot", "sample_covariance", "local_metric_estimate",
        "local_metric_field", "array_jacobian_estimate", "array_metric_field",
    ),
    "metric_net": (
        "NetParams", "TrainConfig", "net_forward", "model_covariance", "net_loglikelihood",
        "net_gradient", "train_metric_net", "cross_validate", "net_metric_field",
    ),
    "embedding": (
        "EmbeddingResult", "MultiscaleConfig", "weighted_stress", "full_stress", "classical_mds",
        "standard_isomap", "intrinsic_isomap", "smacof_step", "smacof_optimize", "procrustes_align",
        "align_to_truth", "detect_embedding_failure", "split_patches", "multiscale_embed",
    ),
    "worlds": (
        "cross_hole_square", "rectangle", "nonconvex_corridor_domain", "severed_sphere_model",
        "identity_model", "gmm_sample_clusters", "sensor_array_sample", "pca_project",
    ),
    "pipeline": ("ExperimentConfig", "RunReport", "run_experiment", "compare_table"),
    "svg": ("emit_scatter_svg",),
}
_WHERE = {name: mod for mod, names in _EXPORTS.items() for name in names}
__all__ = sorted(_WHERE)


def __getattr__(name):
    if name in _WHERE:
        return getattr(import_module(f".{_WHERE[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
