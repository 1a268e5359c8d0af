"""Deterministic ingestion and emission of clouds, meshes, fields, spectra,
models, and experiment configs.

CSV is the interchange spine; every writer pins float formatting to %.17g so
identical inputs produce byte-identical files. Legacy ASCII VTK is emitted
for visualization only.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gp as gp_mod
from .geometry import GaugeFrames, PointCloud
from .spectral import Spectrum

__all__ = [
    "ParseError",
    "NonManifoldWarning",
    "fmt_float",
    "write_points_csv",
    "load_point_cloud",
    "read_vector_csv",
    "write_vector_csv",
    "load_mesh",
    "write_obj",
    "generate_torus",
    "generate_icosphere",
    "write_vtk",
    "save_spectrum",
    "load_spectrum",
    "save_model",
    "load_model",
    "ExperimentConfig",
    "load_config",
    "config_hash",
    "write_metrics_json",
    "write_json_atomic",
    "sha256_file",
]

VTK_HEADER = "# vtk DataFile Version 3.0"


class ParseError(ValueError):
    """Malformed input file; message carries path and line number."""

    def __init__(self, path, line_no: int | None, message: str):
        loc = f"{path}:{line_no}" if line_no is not None else str(path)
        super().__init__(f"{loc}: {message}")


class NonManifoldWarning(UserWarning):
    """An edge of the mesh is shared by more than two faces."""


def fmt_float(x: float) -> str:
    return "%.17g" % x


def _check_finite(values: np.ndarray, path, line_of_row) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        row = int(bad[0][0])
        raise ParseError(path, line_of_row(row), "non-finite value")


# ---------------------------------------------------------------------------
# CSV point/vector format: header id,x0..x{d-1}[,v0..v{d-1}]
# ---------------------------------------------------------------------------

def write_vector_csv(path, points: np.ndarray, vectors: np.ndarray | None = None,
                     ids: np.ndarray | None = None) -> None:
    points = np.asarray(points, dtype=float)
    n, d = points.shape
    if ids is None:
        ids = np.arange(n)
    header = ["id"] + [f"x{a}" for a in range(d)]
    if vectors is not None:
        vectors = np.asarray(vectors, dtype=float)
        if vectors.shape != (n, d):
            raise ValueError("vectors shape mismatch")
        header += [f"v{a}" for a in range(d)]
    lines = [",".join(header)]
    for r in range(n):
        cells = [str(int(ids[r]))] + [fmt_float(v) for v in points[r]]
        if vectors is not None:
            cells += [fmt_float(v) for v in vectors[r]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_points_csv(path, cloud: PointCloud, ids: np.ndarray | None = None) -> None:
    write_vector_csv(path, cloud.points, cloud.vectors, ids)


def read_vector_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Raw (ids, points, vectors-or-None) from the CSV format; no cloud invariants."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise ParseError(path, 1, "empty file")
    header = [h.strip() for h in lines[0].split(",")]
    if not header or header[0] != "id":
        raise ParseError(path, 1, "header must start with 'id'")
    x_cols = [h for h in header if h.startswith("x")]
    v_cols = [h for h in header if h.startswith("v")]
    d = len(x_cols)
    if d < 1 or header[1:1 + d] != [f"x{a}" for a in range(d)]:
        raise ParseError(path, 1, "expected columns x0..x{d-1} after id")
    has_vectors = len(v_cols) > 0
    if has_vectors and header[1 + d:] != [f"v{a}" for a in range(d)]:
        raise ParseError(path, 1, "vector columns must be v0..v{d-1}")
    width = 1 + d + (d if has_vectors else 0)
    ids, pts, vecs = [], [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise ParseError(path, ln, f"expected {width} columns, got {len(cells)}")
        try:
            ids.append(int(cells[0]))
            pts.append([float(c) for c in cells[1:1 + d]])
            if has_vectors:
                vecs.append([float(c) for c in cells[1 + d:]])
        except ValueError as exc:
            raise ParseError(path, ln, f"bad number: {exc}") from None
    ids_arr = np.array(ids, dtype=np.int64)
    pts_arr = np.array(pts, dtype=float).reshape(len(ids), d)
    _check_finite(pts_arr, path, lambda r: r + 2)
    vecs_arr = None
    if has_vectors:
        vecs_arr = np.array(vecs, dtype=float).reshape(len(ids), d)
        _check_finite(vecs_arr, path, lambda r: r + 2)
    return ids_arr, pts_arr, vecs_arr


def load_point_cloud(path) -> tuple[PointCloud, np.ndarray]:
    """PointCloud (with invariants enforced) plus the file's node ids."""
    ids, pts, vecs = read_vector_csv(path)
    return PointCloud(pts, vecs), ids


# ---------------------------------------------------------------------------
# Meshes: ASCII OBJ and PLY, fan triangulation, strict parsing
# ---------------------------------------------------------------------------

_OBJ_SKIP = {"vn", "vt", "vp", "o", "g", "s", "usemtl", "mtllib", "l", "p"}


def _fan(indices: list[int], path, ln: int) -> list[list[int]]:
    if len(indices) < 3:
        raise ParseError(path, ln, "face with fewer than 3 vertices")
    return [[indices[0], indices[a], indices[a + 1]] for a in range(1, len(indices) - 1)]


def _load_obj(path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    verts: list[list[float]] = []
    vert_lines: list[int] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            key = tokens[0]
            if key == "v":
                if len(tokens) < 4:
                    raise ParseError(path, ln, "vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tokens[1:4]])
                except ValueError:
                    raise ParseError(path, ln, "bad vertex coordinate") from None
                vert_lines.append(ln)
            elif key == "f":
                idx = []
                for tok in tokens[1:]:
                    head = tok.split("/")[0]
                    try:
                        v = int(head)
                    except ValueError:
                        raise ParseError(path, ln, f"bad face index {tok!r}") from None
                    if v <= 0:
                        raise ParseError(path, ln, "face indices must be positive")
                    if v > len(verts):
                        raise ParseError(path, ln, f"face index {v} out of range")
                    idx.append(v - 1)
                faces.extend(_fan(idx, path, ln))
            elif key in _OBJ_SKIP:
                continue
            else:
                raise ParseError(path, ln, f"unknown element type {key!r}")
    return (np.array(verts, dtype=float),
            np.array(faces, dtype=np.int64).reshape(-1, 3), vert_lines)


def _load_ply(path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "not a PLY file")
    elements: list[tuple[str, int, list[str]]] = []
    ln = 1
    fmt_seen = False
    while ln < len(lines):
        tokens = lines[ln].split()
        ln += 1
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ParseError(path, ln, "only ASCII PLY is supported")
            fmt_seen = True
        elif tokens[0] == "element":
            if tokens[1] not in ("vertex", "face"):
                raise ParseError(path, ln, f"unknown element type {tokens[1]!r}")
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ParseError(path, ln, "property before any element")
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            break
        else:
            raise ParseError(path, ln, f"unknown header keyword {tokens[0]!r}")
    else:
        raise ParseError(path, None, "missing end_header")
    if not fmt_seen:
        raise ParseError(path, None, "missing format line")

    verts = np.empty((0, 3))
    vert_lines: list[int] = []
    faces: list[list[int]] = []
    for name, count, props in elements:
        if name == "vertex":
            for axis in ("x", "y", "z"):
                if axis not in props:
                    raise ParseError(path, None, f"vertex element missing property {axis}")
            cols = [props.index(a) for a in ("x", "y", "z")]
            rows = []
            for r in range(count):
                tokens = lines[ln].split()
                ln += 1
                if len(tokens) != len(props):
                    raise ParseError(path, ln, "wrong number of vertex properties")
                try:
                    rows.append([float(tokens[c]) for c in cols])
                except ValueError:
                    raise ParseError(path, ln, "bad vertex value") from None
                vert_lines.append(ln)
            verts = np.array(rows, dtype=float).reshape(count, 3)
        else:
            for r in range(count):
                tokens = lines[ln].split()
                ln += 1
                try:
                    cnt = int(tokens[0])
                    idx = [int(t) for t in tokens[1:1 + cnt]]
                except (ValueError, IndexError):
                    raise ParseError(path, ln, "bad face record") from None
                if len(idx) != cnt:
                    raise ParseError(path, ln, "face count/index mismatch")
                if any(v < 0 or v >= len(verts) for v in idx):
                    raise ParseError(path, ln, "face index out of range")
                faces.extend(_fan(idx, path, ln))
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3), vert_lines


def _warn_non_manifold(faces: np.ndarray, path) -> None:
    if faces.size == 0:
        return
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [0, 2]]])
    pairs = np.sort(pairs, axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    if counts.max(initial=0) > 2:
        warnings.warn(f"{path}: non-manifold mesh (an edge is shared by "
                      f"{counts.max()} faces)", NonManifoldWarning)


def load_mesh(path) -> tuple[PointCloud, np.ndarray]:
    """Vertices (declaration order) and fan-triangulated faces from OBJ or PLY."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        verts, faces, vert_lines = _load_obj(path)
    elif suffix == ".ply":
        verts, faces, vert_lines = _load_ply(path)
    else:
        raise ParseError(path, None, f"unsupported mesh format {suffix!r}")
    if len(verts) == 0:
        raise ParseError(path, None, "mesh has no vertices")
    _check_finite(verts, path, lambda r: vert_lines[r])
    _warn_non_manifold(faces, path)
    return PointCloud(verts), faces


def write_obj(path, points: np.ndarray, faces: np.ndarray) -> None:
    points = np.asarray(points, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = []
    for p in points:
        lines.append("v " + " ".join(fmt_float(v) for v in p))
    for f in faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Parametric meshes
# ---------------------------------------------------------------------------

def generate_torus(major_radius: float, minor_radius: float, n_major: int,
                   n_minor: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangulated torus; vertex count equals n_major * n_minor."""
    if n_major < 3 or n_minor < 3:
        raise ValueError("need at least 3 samples around each circle")
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ring = major_radius + minor_radius * np.cos(vv)
    pts = np.stack([ring * np.cos(uu), ring * np.sin(uu),
                    minor_radius * np.sin(vv)], axis=-1).reshape(-1, 3)
    faces = []
    for a in range(n_major):
        for b in range(n_minor):
            p00 = a * n_minor + b
            p01 = a * n_minor + (b + 1) % n_minor
            p10 = ((a + 1) % n_major) * n_minor + b
            p11 = ((a + 1) % n_major) * n_minor + (b + 1) % n_minor
            faces.append([p00, p10, p11])
            faces.append([p00, p11, p01])
    return pts, np.array(faces, dtype=np.int64)


def generate_icosphere(subdivisions: int = 2, radius: float = 1.0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Subdivided icosahedron projected to a sphere (12, 42, 162, 642, ... verts)."""
    phi = (1 + math.sqrt(5)) / 2
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []
        vert_list = [v for v in verts]

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                mid = vert_list[a] + vert_list[b]
                mid /= np.linalg.norm(mid)
                cache[key] = len(vert_list)
                vert_list.append(mid)
            return cache[key]

        for f in faces:
            a, b, c = int(f[0]), int(f[1]), int(f[2])
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(vert_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts * radius, faces


# ---------------------------------------------------------------------------
# VTK export (visualization only)
# ---------------------------------------------------------------------------

def write_vtk(path, points: np.ndarray, vectors: np.ndarray, name: str = "field",
              faces: np.ndarray | None = None) -> None:
    """Legacy ASCII VTK polydata with one named point vector attribute."""
    points = np.asarray(points, dtype=float)
    vectors = np.asarray(vectors, dtype=float)
    if points.shape[0] != vectors.shape[0]:
        raise ValueError("point/vector count mismatch")
    if points.shape[1] == 2:
        points = np.column_stack([points, np.zeros(len(points))])
        vectors = np.column_stack([vectors, np.zeros(len(vectors))])
    if points.shape[1] != 3:
        raise ValueError("VTK export needs 2- or 3-dimensional points")
    n = points.shape[0]
    lines = [VTK_HEADER, name, "ASCII", "DATASET POLYDATA", f"POINTS {n} double"]
    for p in points:
        lines.append(" ".join(fmt_float(v) for v in p))
    if faces is not None and len(faces):
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        lines.append(f"POLYGONS {len(faces)} {4 * len(faces)}")
        for f in faces:
            lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    else:
        lines.append(f"VERTICES {n} {2 * n}")
        for a in range(n):
            lines.append(f"1 {a}")
    lines.append(f"POINT_DATA {n}")
    lines.append(f"VECTORS {name} double")
    for v in vectors:
        lines.append(" ".join(fmt_float(x) for x in v))
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write VTK file {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Spectrum persistence: eigenvalue CSV + eigenvector CSV + JSON manifest
# ---------------------------------------------------------------------------

def write_json_atomic(path, payload: dict) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _write_matrix_csv(path, matrix: np.ndarray) -> None:
    lines = [",".join(fmt_float(v) for v in row) for row in np.atleast_2d(matrix)]
    Path(path).write_text("\n".join(lines) + "\n")


def _read_matrix_csv(path) -> np.ndarray:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(c) for c in line.split(",")])
        except ValueError:
            raise ParseError(path, ln, "bad number") from None
    mat = np.array(rows, dtype=float)
    _check_finite(mat, path, lambda r: r + 1)
    return mat


def save_spectrum(directory, spectrum: Spectrum, solver_tol: float = 1e-10) -> Path:
    """Write eigenvalues.csv, eigenvectors.csv and spectrum.json into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_matrix_csv(directory / "eigenvalues.csv", spectrum.eigenvalues[None, :].T)
    _write_matrix_csv(directory / "eigenvectors.csv", spectrum.eigenvectors)
    write_json_atomic(directory / "spectrum.json", {
        "n": spectrum.n,
        "m": spectrum.m,
        "k": spectrum.k,
        "next_eigenvalue": spectrum.next_eigenvalue,
        "sign_convention": "largest-magnitude entry of each eigenvector positive; "
                           "off-diagonal blocks are -w_ij O_ij",
        "solver_tolerance": solver_tol,
        "eigenvalues_csv": "eigenvalues.csv",
        "eigenvectors_csv": "eigenvectors.csv",
    })
    return directory / "spectrum.json"


def load_spectrum(directory) -> Spectrum:
    directory = Path(directory)
    manifest = json.loads((directory / "spectrum.json").read_text())
    vals = _read_matrix_csv(directory / manifest["eigenvalues_csv"]).reshape(-1)
    vecs = _read_matrix_csv(directory / manifest["eigenvectors_csv"])
    return Spectrum(
        eigenvalues=vals,
        eigenvectors=vecs,
        n=int(manifest["n"]),
        m=int(manifest["m"]),
        next_eigenvalue=manifest.get("next_eigenvalue"),
    )


# ---------------------------------------------------------------------------
# Model persistence: JSON manifest + CSV matrices, no binary formats
# ---------------------------------------------------------------------------

def save_model(directory, model: gp_mod.VectorFieldGP, frames: GaugeFrames) -> Path:
    """Persist a fitted model as spectrum dir + frames/targets CSV + manifest.

    The Cholesky factor is recomputed on load (deterministically) rather
    than serialized.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_spectrum(directory / "spectrum", model.spectrum)
    n, d, m = frames.frames.shape
    _write_matrix_csv(directory / "frames.csv", frames.frames.reshape(n, d * m))
    _write_matrix_csv(directory / "targets.csv", model.targets)
    hp = model.hyperparams
    write_json_atomic(directory / "model.json", {
        "format": "tangentgp-model/1",
        "hyperparams": {"sigma": hp.sigma, "kappa": hp.kappa,
                        "nu": "inf" if math.isinf(hp.nu) else hp.nu,
                        "sigma_n": hp.sigma_n},
        "c_norm": model.c_norm,
        "train_nodes": [int(i) for i in model.train_nodes],
        "frame_shape": [n, d, m],
        "spectrum": "spectrum",
        "frames_csv": "frames.csv",
        "targets_csv": "targets.csv",
    })
    return directory / "model.json"


def load_model(directory) -> tuple[gp_mod.VectorFieldGP, GaugeFrames]:
    directory = Path(directory)
    manifest = json.loads((directory / "model.json").read_text())
    if manifest.get("format") != "tangentgp-model/1":
        raise ParseError(directory / "model.json", None, "unknown model format")
    spectrum = load_spectrum(directory / manifest["spectrum"])
    n, d, m = manifest["frame_shape"]
    frames = GaugeFrames(_read_matrix_csv(directory / manifest["frames_csv"])
                         .reshape(n, d, m))
    targets = _read_matrix_csv(directory / manifest["targets_csv"]).reshape(-1, d)
    hp_raw = manifest["hyperparams"]
    nu = math.inf if hp_raw["nu"] == "inf" else float(hp_raw["nu"])
    hp = gp_mod.MaternHyperparams(sigma=float(hp_raw["sigma"]),
                                  kappa=float(hp_raw["kappa"]), nu=nu,
                                  sigma_n=float(hp_raw["sigma_n"]))
    train_nodes = np.array(manifest["train_nodes"], dtype=np.int64)
    model = gp_mod.fit(train_nodes, targets, spectrum, frames, hp)
    return model, frames


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

KINDS = ("generate", "superresolve", "inpaint", "fit", "predict", "eval", "spectrum")


@dataclass
class GraphConfig:
    k_neighbors: int = 5
    weighting: str = "unit"
    bandwidth: float | None = None
    use_mesh_edges: bool = False
    on_disconnected: str = "error"


@dataclass
class ExperimentConfig:
    """Validated run configuration; a single JSON document on disk."""

    kind: str
    output_dir: str
    seed: int = 0
    input_mesh: str | None = None
    input_cloud: str | None = None
    field: str | None = None
    graph: GraphConfig = dataclasses.field(default_factory=GraphConfig)
    manifold_dim: int = 2
    frame_neighbors: int | str = "auto"
    num_eigenvectors: int | list = 50
    hyperparams: dict | None = None
    fit: dict | None = None
    baseline_hyperparams: dict | None = None
    tau: float = 100.0
    anchor_count: int | None = None
    anchor_fraction: float | None = 0.1
    split_fraction: float = 0.5
    mask: dict | None = None
    query: str | list = "all"
    query_points: str | None = None
    allow_out_of_graph: bool = False
    model_dir: str | None = None
    inducing_fraction: float | None = None
    raw: dict = dataclasses.field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        ks = self.num_eigenvectors if isinstance(self.num_eigenvectors, list) \
            else [self.num_eigenvectors]
        if not ks or any(int(k) < 1 for k in ks):
            raise ValueError("num_eigenvectors must be >= 1")
        if self.graph.weighting not in ("unit", "gaussian"):
            raise ValueError(f"unknown weighting {self.graph.weighting!r}")
        for attr in ("input_mesh", "input_cloud", "field", "query_points", "model_dir"):
            p = getattr(self, attr)
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(f"config {attr}: no such path {p!r}")

    @property
    def k_list(self) -> list[int]:
        ks = self.num_eigenvectors
        return [int(v) for v in ks] if isinstance(ks, list) else [int(ks)]

    def hyperparams_obj(self) -> gp_mod.MaternHyperparams | None:
        return _hp_from_dict(self.hyperparams)


def _hp_from_dict(raw: dict | None) -> gp_mod.MaternHyperparams | None:
    if raw is None:
        return None
    nu = raw.get("nu", 1.5)
    if isinstance(nu, str):
        nu = math.inf if nu == "inf" else float(nu)
    return gp_mod.MaternHyperparams(
        sigma=float(raw.get("sigma", 1.0)),
        kappa=float(raw.get("kappa", 1.0)),
        nu=nu,
        sigma_n=float(raw.get("sigma_n", 1e-3)),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ParseError(path, 1, "config must be a JSON object")
    known = {f for f in ExperimentConfig.__dataclass_fields__ if f != "raw"}
    unknown = set(raw) - known
    if unknown:
        raise ParseError(path, None, f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "graph" in kwargs:
        graw = kwargs["graph"]
        gknown = set(GraphConfig.__dataclass_fields__)
        gunknown = set(graw) - gknown
        if gunknown:
            raise ParseError(path, None, f"unknown graph keys: {sorted(gunknown)}")
        kwargs["graph"] = GraphConfig(**graw)
    base = path.parent
    for attr in ("input_mesh", "input_cloud", "field", "query_points", "model_dir"):
        if kwargs.get(attr):
            kwargs[attr] = str((base / kwargs[attr]).resolve())
    if kwargs.get("output_dir"):
        kwargs["output_dir"] = str((base / kwargs["output_dir"]).resolve())
    return ExperimentConfig(raw=raw, **kwargs)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form; stable under key reordering."""
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"),
                           ensure_ascii=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_metrics_json(path, metrics: list) -> None:
    records = [m.to_dict() if hasattr(m, "to_dict") else dict(m) for m in metrics]
    write_json_atomic(path, {"metrics": records})


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
