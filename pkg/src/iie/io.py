"""On-disk formats for datasets, graphs, metric fields and embeddings.

Floats are written with ``repr`` so every value round-trips exactly and the
same inputs always produce the same bytes.

Geodesic matrices use a small binary layout: a little-endian header of two
``uint32`` values (``N`` and a reserved zero) followed by ``N*N`` float64
values in row-major order.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .embedding import EmbeddingResult, FailureReport
from .errors import InvalidInput
from .estimation import ObservationClusters, SensorArrayShot
from .metric_field import DistanceGraph, MetricField, PointSet

FORMAT_VERSION = 1
_GEO_HEADER = struct.Struct("<II")


def _f(x) -> str:
    return repr(float(x))


def _write_rows(path, header, rows):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_rows(path):
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r if row]


def write_json(path, obj):
    """Stable JSON: sorted keys, fixed indentation, trailing newline."""
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- graphs


def save_graph_csv(graph: DistanceGraph, path):
    rows = ((int(a), int(b), _f(d), int(w)) for a, b, d, w in zip(graph.i, graph.j, graph.dist, graph.weight))
    return _write_rows(path, ["i", "j", "dist", "weight"], rows)


def load_graph_csv(path, num_vertices: int | None = None) -> DistanceGraph:
    header, rows = _read_rows(path)
    if header != ["i", "j", "dist", "weight"]:
        raise InvalidInput(f"unexpected graph header {header}")
    a = np.array([[int(r[0]), int(r[1])] for r in rows], dtype=np.int64).reshape(-1, 2)
    d = np.array([float(r[2]) for r in rows])
    w = np.array([float(r[3]) for r in rows])
    if num_vertices is None:
        num_vertices = int(a.max()) + 1 if a.size else 0
    return DistanceGraph(a[:, 0], a[:, 1], d, w, num_vertices)


def save_geodesics(G, path):
    G = np.ascontiguousarray(G, dtype="<f8")
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidInput("geodesic matrix must be square")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_GEO_HEADER.pack(G.shape[0], 0))
        fh.write(G.tobytes(order="C"))
    return path


def load_geodesics(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _GEO_HEADER.size:
        raise InvalidInput("geodesic file is truncated")
    N, _ = _GEO_HEADER.unpack_from(raw)
    body = raw[_GEO_HEADER.size:]
    if len(body) != 8 * N * N:
        raise InvalidInput(f"geodesic file holds {len(body)} bytes, expected {8 * N * N}")
    return np.frombuffer(body, dtype="<f8").reshape(N, N).copy()


# ---------------------------------------------------------------- datasets


def save_points_csv(points, path, prefix="x"):
    P = points.points if isinstance(points, PointSet) else np.atleast_2d(points)
    header = ["id"] + [f"{prefix}_{k}" for k in range(P.shape[1])]
    return _write_rows(path, header, ([i] + [_f(v) for v in row] for i, row in enumerate(P)))


def load_points_csv(path) -> PointSet:
    _, rows = _read_rows(path)
    rows.sort(key=lambda r: int(r[0]))
    return PointSet(np.array([[float(v) for v in r[1:]] for r in rows]))


def save_clusters_csv(clusters: ObservationClusters, path):
    m = clusters.m
    header = ["cluster_id", "sample_idx"] + [f"y_{k}" for k in range(m)]

    def rows():
        for cid, ys in clusters.clusters:
            for s, y in enumerate(ys):
                yield [cid, s] + [_f(v) for v in y]

    return _write_rows(path, header, rows())


def load_clusters_csv(path, sigma_int_sq, sigma_obs_sq, intrinsic_dim) -> ObservationClusters:
    header, rows = _read_rows(path)
    if header[:2] != ["cluster_id", "sample_idx"]:
        raise InvalidInput(f"unexpected cluster header {header}")
    groups: dict[int, list] = {}
    for r in rows:
        groups.setdefault(int(r[0]), []).append((int(r[1]), [float(v) for v in r[2:]]))
    clusters = [(cid, np.array([y for _, y in sorted(g)])) for cid, g in sorted(groups.items())]
    return ObservationClusters(clusters, sigma_int_sq, sigma_obs_sq, intrinsic_dim)


def save_array_shots(shots, path):
    """CSV ``shot_id,sensor,y_0..`` (sensor 0 is the base) plus an offsets sidecar."""
    if not shots:
        raise InvalidInput("no shots to save")
    U = shots[0].offsets
    if any(not np.array_equal(s.offsets, U) for s in shots):
        raise InvalidInput("all shots must share one array geometry")
    m = shots[0].base_obs.size
    header = ["shot_id", "sensor"] + [f"y_{k}" for k in range(m)]

    def rows():
        for sid, s in enumerate(shots):
            yield [sid, 0] + [_f(v) for v in s.base_obs]
            for l, y in enumerate(s.displaced_obs, start=1):
                yield [sid, l] + [_f(v) for v in y]

    path = _write_rows(path, header, rows())
    write_json(_sidecar(path), {"offsets": U.tolist(), "format_version": FORMAT_VERSION})
    return path


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.stem + ".offsets.json")


def load_array_shots(path) -> list:
    U = np.asarray(read_json(_sidecar(path))["offsets"], dtype=float)
    _, rows = _read_rows(path)
    by_shot: dict[int, dict] = {}
    for r in rows:
        by_shot.setdefault(int(r[0]), {})[int(r[1])] = [float(v) for v in r[2:]]
    shots = []
    for sid in sorted(by_shot):
        obs = by_shot[sid]
        shots.append(SensorArrayShot(np.array(obs[0]), np.array([obs[l] for l in range(1, U.shape[1] + 1)]), U))
    return shots


def save_metric_field(field: MetricField, path):
    """Metric tensors as a ``.npy`` stack of shape (N, m, m)."""
    path = Path(path)
    np.save(path, np.ascontiguousarray(field.tensors))
    return path


def load_metric_field(path, intrinsic_dim) -> MetricField:
    return MetricField(np.load(path), intrinsic_dim)


# ---------------------------------------------------------------- embeddings


def save_embedding(result: EmbeddingResult, path):
    """``id,x_0..`` CSV plus a ``.json`` diagnostics file next to it."""
    path = Path(path)
    save_points_csv(result.coords, path)
    write_json(path.with_suffix(".json"), result.diagnostics())
    return path


def load_embedding(path) -> EmbeddingResult:
    path = Path(path)
    coords = load_points_csv(path).points
    diag = read_json(path.with_suffix(".json"))
    return EmbeddingResult(
        coords,
        diag["stress"],
        diag.get("full_stress_vs_truth"),
        diag.get("iterations", 0),
        diag.get("converged", True),
        diag.get("rank_deficient", False),
        failure=FailureReport(**diag["failure_report"]) if diag.get("failure_report") else None,
        tree=diag.get("patch_tree"),
    )


def write_manifest(directory, generator, params, seed, files=()):
    return write_json(
        Path(directory) / "manifest.json",
        {"generator": generator, "params": params, "seed": int(seed),
         "format_version": FORMAT_VERSION, "files": sorted(files)},
    )
