import json
import re

import numpy as np
import pytest

from iie import io
from iie.cli import main
from iie.embedding import align_to_truth, full_stress
from iie.errors import InvalidInput, StageError
from iie.metric_field import pushforward_metrics
from iie.pipeline import TABLE_COLUMNS, ExperimentConfig, RunReport, compare_table, load_config, run_experiment
from iie.svg import emit_points_svg, emit_scatter_svg
from iie.worlds import severed_sphere_model

SMALL = dict(N=300, k=12, candidates=50)
IDENTITY = dict(model="identity", domain="rectangle", N=300, k=10, candidates=None)


@pytest.fixture(scope="module")
def sphere_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("sphere")
    return run_experiment(ExperimentConfig(name="sphere", N=600, k=20, candidates=80), out)


# ---------------------------------------------------------------- config


def test_config_rejects_unknown_and_invalid_values():
    with pytest.raises(InvalidInput):
        ExperimentConfig.from_dict({"N": 100, "nieghbors": 3})
    with pytest.raises(InvalidInput):
        ExperimentConfig(metric_source="oracle")
    with pytest.raises(InvalidInput):
        ExperimentConfig(N=10, k=10)
    with pytest.raises(InvalidInput):
        ExperimentConfig(multiscale={"treshold": 0.1})
    with pytest.raises(InvalidInput):
        ExperimentConfig(net={"epochs": 3})
    with pytest.raises(InvalidInput):
        ExperimentConfig(metric_source="net", sigma_obs=0.0)
    with pytest.raises(InvalidInput):
        ExperimentConfig(domain="torus")


def test_config_overrides_and_round_trip(tmp_path):
    cfg = ExperimentConfig().with_overrides({"k": 15, "multiscale.threshold": 0.005, "net.max_epochs": 10})
    assert cfg.k == 15 and cfg.multiscale == {"threshold": 0.005} and cfg.net == {"max_epochs": 10}
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidInput):
        cfg.with_overrides({"bogus": 1})
    with pytest.raises(InvalidInput):
        cfg.with_overrides({"k.x": 1})
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg
    p.write_text("[1, 2]")
    with pytest.raises(InvalidInput):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(InvalidInput):
        load_config(p)


# ---------------------------------------------------------------- runs


def test_severed_sphere_method_ordering(sphere_run):
    m = sphere_run.data["methods"]
    ours, iso, std = (m[k]["full_stress"] for k in ("intrinsic_isometric", "intrinsic_isomap", "standard_isomap"))
    assert ours < iso < std < np.inf
    assert sphere_run.exit_code == 0


def test_identity_world_has_near_zero_stress():
    rep = run_experiment(ExperimentConfig(**IDENTITY))
    total = rep.data["diameter"] ** 2 * 300 * 299 / 2
    for entry in rep.data["methods"].values():
        # normalised by an upper bound on sum of squared true distances
        assert entry["full_stress"] / total < 1e-3
    assert rep.data["methods"]["intrinsic_isometric"]["aligned_rmsd"] < 1e-6


def test_artifacts_exist_and_recompute_report_numbers(sphere_run):
    out = sphere_run.out_dir
    for name in sphere_run.data["artifacts"]:
        assert (out / name).exists(), name
    truth = io.load_points_csv(out / "truth.csv")
    observed = io.load_points_csv(out / "observed.csv")
    graph = io.load_graph_csv(out / "graph.csv", len(truth))
    G = io.load_geodesics(out / "geodesics.bin")
    assert G.shape == (len(truth), len(truth))
    for method, entry in sphere_run.data["methods"].items():
        emb = io.load_embedding(out / f"embedding_{method}.csv")
        assert full_stress(emb.coords, truth) == entry["full_stress"]
        assert align_to_truth(emb.coords, truth)[1] == entry["aligned_rmsd"]
    true_len = np.linalg.norm(truth.points[graph.i] - truth.points[graph.j], axis=1)
    rel = np.abs(graph.dist - true_len) / true_len
    assert float(np.quantile(rel, 0.5)) == sphere_run.data["distance_error"]["q50"]
    M = io.load_metric_field(out / "metric.npy", 2)
    assert len(M) == len(observed)
    Mt = pushforward_metrics(severed_sphere_model().jac(truth.points))
    err = np.median(np.linalg.norm(M.tensors - Mt, axis=(1, 2)) / np.linalg.norm(Mt, axis=(1, 2)))
    assert float(err) == sphere_run.data["metric_error"]["median_frobenius_rel"]
    manifest = io.read_json(out / "manifest.json")
    assert manifest["seed"] == 0 and manifest["format_version"] == io.FORMAT_VERSION
    assert RunReport.load(out).data == sphere_run.data


def test_same_seed_gives_identical_bytes(tmp_path):
    cfg = ExperimentConfig(**SMALL, plots=True)
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert a.data["artifacts"] == b.data["artifacts"]
    for name in a.data["artifacts"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    c = run_experiment(cfg.with_overrides({"seed": 1}))
    assert c.data["methods"] != a.data["methods"]


@pytest.mark.parametrize("source", ["local", "array", "net"])
def test_estimated_metric_sources_run(tmp_path, source):
    cfg = ExperimentConfig(**SMALL, metric_source=source, N_i=10, net={"max_epochs": 20, "learning_rate": 1e-2})
    rep = run_experiment(cfg, tmp_path)
    assert rep.exit_code in (0, 2)
    assert rep.data["metric_error"]["median_frobenius_rel"] > 0
    if source == "net":
        curve = (tmp_path / "training_curve.csv").read_text().splitlines()
        assert curve[0] == "epoch,train_ll,val_ll" and len(curve) >= 2
        assert "architecture" in io.read_json(tmp_path / "net.json")
    if source == "local":
        assert (tmp_path / "clusters.csv").exists()
    if source == "array":
        assert (tmp_path / "shots.offsets.json").exists()


def test_net_source_with_cross_validation():
    cfg = ExperimentConfig(N=120, k=10, candidates=40, metric_source="net", N_i=5,
                           net={"max_epochs": 5, "folds": 2}, cv_grid=[[[4, 4], 1e-3], [[6, 6], 1e-2]])
    rep = run_experiment(cfg)
    assert len(rep.data["cv"]["scores"]) == 2
    assert rep.data["net"]["train_config"]["hidden"] == rep.data["cv"]["best"]["hidden"]


def test_pca_preprocessing_keeps_metric_exact():
    rep = run_experiment(ExperimentConfig(**SMALL, pca_components=3), stop_after="estimate")
    assert rep.data["metric_error"]["median_frobenius_rel"] < 1e-10


def test_stop_after_limits_stages(tmp_path):
    rep = run_experiment(ExperimentConfig(**SMALL), tmp_path, stop_after="graph")
    assert rep.data["stages_run"] == ["generate", "estimate", "graph"]
    assert "methods" not in rep.data and (tmp_path / "geodesics.bin").exists()
    with pytest.raises(InvalidInput):
        run_experiment(ExperimentConfig(**SMALL), stop_after="render")


def test_stage_errors_name_the_stage():
    with pytest.raises(StageError) as info:
        run_experiment(ExperimentConfig(**SMALL, model_params={"bogus": 1}))
    assert info.value.stage == "generate"


def test_flagged_failure_gives_exit_code_two():
    rep = run_experiment(ExperimentConfig(**SMALL, multiscale={"enabled": False, "threshold": 0.0}))
    assert rep.data["failure"]["failed"] and rep.exit_code == 2


# ---------------------------------------------------------------- comparison table


def test_compare_table_shapes_and_values(sphere_run):
    assert compare_table([]).splitlines() == ["  ".join(TABLE_COLUMNS)]
    csv_text = compare_table([sphere_run], "csv").splitlines()
    assert csv_text[0] == ",".join(TABLE_COLUMNS)
    assert len(csv_text) == 1 + 3
    for line in csv_text[1:]:
        cells = line.split(",")
        entry = sphere_run.data["methods"][cells[4]]
        assert float(cells[5]) == entry["full_stress"]
        assert float(cells[6]) == entry["aligned_rmsd"]
        assert float(cells[7]) >= 0
    assert compare_table([sphere_run]) == compare_table([sphere_run])
    with pytest.raises(InvalidInput):
        compare_table([sphere_run], "xlsx")


# ---------------------------------------------------------------- SVG


def test_scatter_svg(tmp_path):
    empty = emit_scatter_svg([], tmp_path / "e.svg").read_text()
    assert empty.startswith("<svg") and "<circle" not in empty and "stroke=\"black\"" in empty
    pairs = [(0.5, 0.5), (1.0, 1.0), (2.0, 2.0)]
    text = emit_scatter_svg(pairs, tmp_path / "s.svg", "t").read_text()
    dots = [(float(x), float(y)) for x, y in re.findall(r'<circle cx="([\d.]+)" cy="([\d.]+)"', text)]
    assert len(dots) == 3
    # points on the identity line are collinear in pixel space
    (x0, y0), (x1, y1), (x2, y2) = dots
    assert abs((x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)) < 1.0
    assert emit_scatter_svg(pairs, tmp_path / "s2.svg", "t").read_bytes() == (tmp_path / "s.svg").read_bytes()
    with pytest.raises(OSError):
        emit_scatter_svg(pairs, tmp_path / "missing" / "x.svg")


def test_points_svg(tmp_path):
    P = np.random.default_rng(0).normal(size=(10, 2))
    text = emit_points_svg(P, tmp_path / "p.svg", P[:, 0], "pts").read_text()
    assert text.count("<circle") == 10


# ---------------------------------------------------------------- CLI


def test_cli_run_compare_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"name": "cli", **IDENTITY}))
    assert main(["run", "--config", str(cfg), "--set", "k=12", "--out", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "intrinsic_isometric" in out
    rep = io.read_json(tmp_path / "r" / "report.json")
    assert rep["config"]["k"] == 12
    assert main(["compare", str(tmp_path / "r"), "--csv"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == ",".join(TABLE_COLUMNS)
    assert main(["report", str(tmp_path / "r")]) == 0
    assert '"exit_code": 0' in capsys.readouterr().out


def test_cli_seed_env_and_threads(tmp_path, monkeypatch):
    monkeypatch.setenv("IIE_SEED", "5")
    assert main(["generate", "--set", "N=50", "--set", "k=5", "--threads", "1", "--out", str(tmp_path)]) == 0
    assert io.read_json(tmp_path / "report.json")["config"]["seed"] == 5
    assert io.read_json(tmp_path / "manifest.json")["seed"] == 5


def test_cli_errors_exit_one(tmp_path, capsys):
    assert main(["run", "--set", "k=5000"]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["run", "--set", "model_params={\"bogus\": 1}", "--set", "N=50", "--set", "k=5"]) == 1
    assert "stage generate" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "nowhere")]) == 1


def test_cli_flagged_failure_exit_two(tmp_path):
    code = main(["run", "--set", "N=300", "--set", "k=12", "--set", "candidates=50",
                 "--set", "multiscale.enabled=false", "--set", "multiscale.threshold=0", "--set", "plots=false",
                 "--out", str(tmp_path)])
    assert code == 2
