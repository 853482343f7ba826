"""Config-driven experiment runs: generate, estimate, embed, evaluate, report.

A run directory holds every artifact a report refers to, so each number in
``report.json`` can be recomputed from disk.  Wall-clock timings live in a
separate ``timings.json`` so the report itself is a pure function of the
config.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .embedding import (
    EmbeddingResult,
    MultiscaleConfig,
    align_to_truth,
    detect_embedding_failure,
    full_stress,
    intrinsic_isomap,
    multiscale_embed,
    standard_isomap,
)
from .errors import IIEError, InvalidInput, StageError
from .estimation import ObservationClusters, SensorArrayShot, array_metric_field, local_metric_field
from .metric_field import MetricField, PointSet, build_knn_graph, geodesic_all_pairs, pushforward_metrics
from .metric_net import (
    DEFAULT_GRID,
    TrainConfig,
    cross_validate,
    net_metric_field,
    train_config_from_dict,
    train_config_to_dict,
    train_metric_net,
)
from .svg import emit_points_svg, emit_scatter_svg
from .worlds import DEFAULT_L_ARRAY, DOMAINS, MODELS, gmm_sample_clusters, pca_project, sensor_array_sample

log = logging.getLogger(__name__)

METRIC_SOURCES = ("analytic", "local", "array", "net")
METHODS = ("standard_isomap", "intrinsic_isomap", "intrinsic_isometric")
STAGES = ("generate", "estimate", "graph", "embed", "evaluate")

EXIT_OK, EXIT_ERROR, EXIT_FAILURE_FLAGGED = 0, 1, 2


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    domain: str = "cross_hole_square"
    domain_params: dict = field(default_factory=dict)
    model: str = "severed_sphere"
    model_params: dict = field(default_factory=dict)
    N: int = 1000
    N_i: int = 200
    sigma_int: float = 0.03
    sigma_obs: float = 0.03
    array_offsets: list = field(default_factory=lambda: [list(r) for r in DEFAULT_L_ARRAY])
    randomize_rotation: bool = True
    pca_components: int | None = None
    metric_source: str = "analytic"
    k: int = 30
    candidates: int | None = 120
    n: int = 2
    multiscale: dict = field(default_factory=dict)
    net: dict = field(default_factory=dict)
    cv_grid: list | str | None = None  # list of [hidden, weight_decay] or "default"
    baselines: bool = True
    plots: bool = True
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise InvalidInput(f"unknown domain {self.domain!r}; choose from {sorted(DOMAINS)}")
        if self.model not in MODELS:
            raise InvalidInput(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.metric_source not in METRIC_SOURCES:
            raise InvalidInput(f"metric_source must be one of {METRIC_SOURCES}")
        if self.N < 3 or self.k < 1 or self.k >= self.N or self.n < 1:
            raise InvalidInput("need N >= 3, 1 <= k < N and n >= 1")
        if self.metric_source in ("local", "net") and self.N_i < 2:
            raise InvalidInput("cluster-based metric estimation needs N_i >= 2")
        if self.sigma_int < 0 or self.sigma_obs < 0:
            raise InvalidInput("noise levels must be non-negative")
        if self.metric_source in ("local", "net") and self.sigma_int == 0:
            raise InvalidInput("cluster-based metric estimation needs sigma_int > 0")
        if self.metric_source == "net" and self.sigma_obs == 0:
            raise InvalidInput("the network likelihood needs sigma_obs > 0")
        if self.pca_components is not None and self.pca_components < self.n:
            raise InvalidInput("pca_components must be at least n")
        # fail early on malformed nested options
        self.multiscale_config()
        self.train_config()
        if self.cv_grid is not None and self.cv_grid != "default" and not self.cv_grid:
            raise InvalidInput("cv_grid must be non-empty when given")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_overrides(self, overrides: dict) -> ExperimentConfig:
        """Apply ``key=value`` overrides; dotted keys reach into nested dicts."""
        d = self.to_dict()
        for key, value in overrides.items():
            head, _, rest = key.partition(".")
            if head not in d:
                raise InvalidInput(f"unknown config key {head!r}")
            if rest:
                if not isinstance(d[head], dict):
                    raise InvalidInput(f"config key {head!r} is not a mapping")
                d[head] = {**d[head], rest: value}
            else:
                d[head] = value
        return ExperimentConfig.from_dict(d)

    def multiscale_config(self) -> MultiscaleConfig:
        known = {f.name for f in fields(MultiscaleConfig)}
        unknown = set(self.multiscale) - known
        if unknown:
            raise InvalidInput(f"unknown multiscale options: {sorted(unknown)}")
        return MultiscaleConfig(**self.multiscale)

    def train_config(self) -> TrainConfig:
        return train_config_from_dict({"seed": self.seed, **self.net})


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise InvalidInput("config must be a JSON object")
    return ExperimentConfig.from_dict(d)


@dataclass
class RunReport:
    data: dict
    timings: dict = field(default_factory=dict)
    out_dir: Path | None = None

    @property
    def exit_code(self) -> int:
        return self.data["exit_code"]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, directory) -> RunReport:
        directory = Path(directory)
        timings = directory / "timings.json"
        return cls(
            io.read_json(directory / "report.json"),
            io.read_json(timings) if timings.exists() else {},
            directory,
        )


# ---------------------------------------------------------------- stages


@dataclass
class _World:
    truth: PointSet
    observed: PointSet | None = None
    clusters: object = None
    shots: list | None = None
    true_jacobians: np.ndarray | None = None
    basis: object = None


def _generate(cfg: ExperimentConfig) -> _World:
    try:
        domain = DOMAINS[cfg.domain](**cfg.domain_params)
        model = MODELS[cfg.model](**cfg.model_params)
    except TypeError as exc:
        raise InvalidInput(f"bad domain/model parameters: {exc}") from exc
    if model.n != cfg.n:
        raise InvalidInput(f"model has intrinsic dimension {model.n}, config asks for n={cfg.n}")
    if cfg.metric_source in ("local", "net"):
        clusters, truth = gmm_sample_clusters(domain, model, cfg.N, cfg.N_i, cfg.sigma_int, cfg.sigma_obs, cfg.seed)
        world = _World(truth, clusters=clusters)
    elif cfg.metric_source == "array":
        shots, at = sensor_array_sample(domain, model, cfg.N, cfg.array_offsets, cfg.randomize_rotation, cfg.seed)
        world = _World(at.points, shots=shots)
    else:
        truth = domain.sampler(cfg.N, cfg.seed)
        world = _World(truth, observed=PointSet(model(truth.points)))
    world.true_jacobians = model.jac(world.truth.points)
    if cfg.pca_components is not None:
        _apply_pca(world, cfg.pca_components)
    return world


def _apply_pca(world: _World, k: int):
    """Fit PCA on every available observation and rewrite the world in PCA coordinates."""
    if world.clusters is not None:
        allobs = np.concatenate([ys for _, ys in world.clusters.clusters])
    elif world.shots is not None:
        allobs = np.concatenate([np.vstack([s.base_obs, s.displaced_obs]) for s in world.shots])
    else:
        allobs = world.observed.points
    _, basis = pca_project(allobs, k)
    world.basis = basis
    if world.clusters is not None:
        c = world.clusters
        world.clusters = ObservationClusters(
            [(cid, basis.transform(ys)) for cid, ys in c.clusters], c.sigma_int_sq, c.sigma_obs_sq, c.intrinsic_dim
        )
    elif world.shots is not None:
        world.shots = [
            SensorArrayShot(basis.transform(s.base_obs)[0], basis.transform(s.displaced_obs), s.offsets)
            for s in world.shots
        ]
    else:
        world.observed = PointSet(basis.transform(world.observed.points))
    world.true_jacobians = np.einsum("km,nma->nka", basis.components, world.true_jacobians)


def _estimate(cfg: ExperimentConfig, world: _World, out: Path | None, extra: dict):
    if cfg.metric_source == "analytic":
        return world.observed, MetricField(pushforward_metrics(world.true_jacobians), cfg.n)
    if cfg.metric_source == "array":
        return array_metric_field(world.shots)
    if cfg.metric_source == "local":
        return local_metric_field(world.clusters)
    tcfg = cfg.train_config()
    if cfg.cv_grid is not None:
        grid = DEFAULT_GRID if cfg.cv_grid == "default" else [(tuple(h), float(lam)) for h, lam in cfg.cv_grid]
        cv = cross_validate(world.clusters, grid, tcfg)
        tcfg = dataclasses.replace(tcfg, hidden=cv.best[0], weight_decay=cv.best[1])
        extra["cv"] = {"best": {"hidden": list(cv.best[0]), "weight_decay": cv.best[1]}, "scores": cv.scores}
    res = train_metric_net(world.clusters, tcfg)
    extra["net"] = {
        "best_epoch": res.best_epoch,
        "best_val_ll": res.best_val_ll,
        "epochs_run": len(res.curve) - 1,
        "train_config": train_config_to_dict(tcfg),
    }
    if out is not None:
        (out / "net.json").write_text(res.params.to_json() + "\n")
        io._write_rows(out / "training_curve.csv", ["epoch", "train_ll", "val_ll"],
                       ([e, io._f(a), io._f(b)] for e, a, b in res.curve))
    observed = world.clusters.observed()
    return observed, net_metric_field(res.params, observed)


def _relerr_quantiles(est, true):
    mask = true > 0
    rel = np.abs(est[mask] - true[mask]) / true[mask]
    if rel.size == 0:
        return {"q10": None, "q50": None, "q90": None}
    q = np.quantile(rel, [0.1, 0.5, 0.9])
    return {"q10": float(q[0]), "q50": float(q[1]), "q90": float(q[2])}


def _method_entry(res: EmbeddingResult, truth):
    _, rmsd = align_to_truth(res.coords, truth)
    return {"full_stress": full_stress(res.coords, truth), "aligned_rmsd": rmsd, "weighted_stress": res.stress}


def run_experiment(config: ExperimentConfig, out_dir=None, stop_after: str | None = None) -> RunReport:
    """Run the pipeline; with ``stop_after`` only the first stages execute.

    Stage errors are re-raised as :class:`StageError` naming the stage.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise InvalidInput(f"stop_after must be one of {STAGES}")
    out = Path(out_dir or config.out) if (out_dir or config.out) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cfg = config
    timings: dict = {}
    files: list = []
    report: dict = {"name": cfg.name, "config": cfg.to_dict(), "stages_run": []}

    def stage(name, fn, *args, key=None):
        t0 = time.perf_counter()
        try:
            value = fn(*args)
        except IIEError as exc:
            raise StageError(name, exc) from exc
        except (ValueError, np.linalg.LinAlgError, OSError) as exc:
            raise StageError(name, exc) from exc
        timings[key or name] = timings.get(key or name, 0.0) + time.perf_counter() - t0
        if name not in report["stages_run"]:
            report["stages_run"].append(name)
        return value

    def save(fn, obj, fname, *args):
        if out is not None:
            fn(obj, out / fname, *args)
            files.append(fname)

    def done(name):
        return stop_after == name

    # generate
    world = stage("generate", _generate, cfg)
    save(io.save_points_csv, world.truth, "truth.csv")
    if world.clusters is not None:
        save(io.save_clusters_csv, world.clusters, "clusters.csv")
    elif world.shots is not None:
        save(io.save_array_shots, world.shots, "shots.csv")
        files.append("shots.offsets.json")
    if out is not None:
        params = {k: v for k, v in cfg.to_dict().items() if k not in ("out", "name")}
        io.write_manifest(out, f"{cfg.domain}/{cfg.model}/{cfg.metric_source}", params, cfg.seed,
                          files + ["manifest.json"])
    report["num_points"] = int(cfg.N)
    if done("generate"):
        return _finish(report, timings, files, out, EXIT_OK)

    # estimate
    extra: dict = {}
    observed, metric = stage("estimate", _estimate, cfg, world, out, extra)
    report.update(extra)
    if "net" in extra:
        files += ["net.json", "training_curve.csv"]
    save(io.save_points_csv, observed, "observed.csv", "y")
    save(io.save_metric_field, metric, "metric.npy")
    true_M = pushforward_metrics(world.true_jacobians)
    rel = np.linalg.norm(metric.tensors - true_M, axis=(1, 2)) / np.linalg.norm(true_M, axis=(1, 2))
    report["metric_error"] = {"median_frobenius_rel": float(np.median(rel))}
    if done("estimate"):
        return _finish(report, timings, files, out, EXIT_OK)

    # graph
    def make_graph():
        g = build_knn_graph(observed, metric, cfg.k, cfg.candidates)
        return g.largest_component()

    graph, kept = stage("graph", make_graph)
    truth = PointSet(world.truth.points[kept])
    obs_kept = PointSet(observed.points[kept])
    report["dropped_vertices"] = [int(v) for v in graph.dropped]
    report["num_edges"] = len(graph)
    true_len = np.linalg.norm(truth.points[graph.i] - truth.points[graph.j], axis=1)
    report["distance_error"] = _relerr_quantiles(graph.dist, true_len)
    save(io.save_graph_csv, graph, "graph.csv")
    G = stage("graph", geodesic_all_pairs, graph, key="geodesics")
    save(io.save_geodesics, G, "geodesics.bin")
    if done("graph"):
        return _finish(report, timings, files, out, EXIT_OK)

    # embed
    ms = cfg.multiscale_config()

    def embed():
        res = multiscale_embed(graph, cfg.n, ms)
        if res.failure is None:
            res = dataclasses.replace(
                res, failure=detect_embedding_failure(res, graph, G, ms.threshold, ms.failure_sources)
            )
        return res

    ours = stage("embed", embed, key="embed:intrinsic_isometric")
    methods = {"intrinsic_isometric": ours}
    if cfg.baselines:
        methods["intrinsic_isomap"] = stage("embed", intrinsic_isomap, graph, cfg.n, G, key="embed:intrinsic_isomap")
        methods["standard_isomap"] = stage("embed", standard_isomap, obs_kept, cfg.k, cfg.n, key="embed:standard_isomap")
    if done("embed"):
        for name, res in methods.items():
            save(io.save_embedding, res.with_truth(truth), f"embedding_{name}.csv")
            files.append(f"embedding_{name}.json")
        return _finish(report, timings, files, out, EXIT_OK)

    # evaluate
    def evaluate():
        return {name: _method_entry(res, truth) for name, res in methods.items()}

    report["methods"] = stage("evaluate", evaluate)
    report["failure"] = ours.failure.to_dict()
    report["multiscale_tree"] = ours.tree
    report["smacof"] = {"iterations": ours.iterations, "converged": ours.converged}
    report["diameter"] = float(np.linalg.norm(truth.points.max(axis=0) - truth.points.min(axis=0)))
    for name, res in methods.items():
        save(io.save_embedding, res.with_truth(truth), f"embedding_{name}.csv")
        if out is not None:
            files.append(f"embedding_{name}.json")
    if out is not None and cfg.plots:
        emit_points_svg(truth.points, out / "truth.svg", truth.points[:, 0], "ground truth")
        files.append("truth.svg")
        for name, res in methods.items():
            aligned, _ = align_to_truth(res.coords, truth)
            emit_points_svg(aligned, out / f"embedding_{name}.svg", truth.points[:, 0], name)
            files.append(f"embedding_{name}.svg")
        emit_scatter_svg(zip(graph.dist, true_len), out / "distances.svg", "estimated vs true edge length")
        files.append("distances.svg")
    code = EXIT_FAILURE_FLAGGED if ours.failure.failed else EXIT_OK
    return _finish(report, timings, files, out, code)


def _finish(report, timings, files, out, code) -> RunReport:
    report["exit_code"] = code
    report["artifacts"] = sorted(set(files) | ({"report.json", "manifest.json"} if out is not None else set()))
    rr = RunReport(json.loads(json.dumps(report)), timings, out)
    if out is not None:
        (out / "report.json").write_text(rr.to_json())
        io.write_json(out / "timings.json", timings)
    return rr


# ---------------------------------------------------------------- comparison


# runtime_s is the embedding time of that method alone
TABLE_COLUMNS = ("name", "domain", "model", "metric_source", "method", "full_stress", "aligned_rmsd", "runtime_s")


def compare_table(reports, fmt: str = "text") -> str:
    """One row per (report, method); ``fmt`` is ``"text"`` or ``"csv"``."""
    rows = []
    for r in reports:
        d = r.data if isinstance(r, RunReport) else r
        t = r.timings if isinstance(r, RunReport) else {}
        c = d["config"]
        for method in METHODS:
            m = d.get("methods", {}).get(method)
            if m is None:
                continue
            runtime = t.get(f"embed:{method}")
            rows.append([d["name"], c["domain"], c["model"], c["metric_source"], method,
                         repr(m["full_stress"]), repr(m["aligned_rmsd"]),
                         "" if runtime is None else f"{runtime:.3f}"])
    if fmt == "csv":
        return "\n".join(",".join(map(str, row)) for row in [list(TABLE_COLUMNS)] + rows) + "\n"
    if fmt != "text":
        raise InvalidInput("fmt must be 'text' or 'csv'")
    table = [list(TABLE_COLUMNS)] + rows
    widths = [max(len(str(row[k])) for row in table) for k in range(len(TABLE_COLUMNS))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip() for row in table) + "\n"
