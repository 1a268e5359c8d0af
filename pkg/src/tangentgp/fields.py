"""Vector-field generation by heat diffusion, a channel-wise baseline, and metrics.

Ground-truth fields are produced with the vector heat method: diffuse the
tangent field under exp(-L_c tau) to get directions and the per-node norms
under exp(-L tau) to get magnitudes, then recombine. Genus-0 surfaces force
singularities, points where the diffused direction collapses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from . import gp
from .geometry import GaugeFrames, PointCloud, ProximityGraph, TransportMaps, \
    furthest_point_sample
from .spectral import ConnectionLaplacian, GraphLaplacian, Spectrum, scalar_frames

__all__ = [
    "TangentField",
    "VectorHeatResult",
    "GeneratedField",
    "MetricResult",
    "scalar_heat",
    "vector_diffusion",
    "vector_heat",
    "generate_experiment_field",
    "baseline_scalar_rbf_predict",
    "fit_baseline_hyperparameters",
    "alignment_score",
    "angular_error",
    "out_of_tangent_magnitude",
    "boundary_angular_jump",
    "direction_coherence",
    "SINGULARITY_NORM_TOL",
    "ZERO_NORM_TOL",
]

SINGULARITY_NORM_TOL = 1e-12
ZERO_NORM_TOL = 1e-12
HEAT_DENSE_SIZE = 2000


@dataclass(frozen=True)
class TangentField:
    """Per-node tangent coordinates paired with the frames defining them."""

    coords: np.ndarray  # (n, m)
    frames: GaugeFrames

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.shape != (self.frames.n, self.frames.m):
            raise ValueError(
                f"coords must have shape {(self.frames.n, self.frames.m)}, "
                f"got {coords.shape}"
            )
        object.__setattr__(self, "coords", coords)

    def ambient(self) -> np.ndarray:
        return self.frames.to_ambient(self.coords)

    @classmethod
    def from_ambient(cls, vectors: np.ndarray, frames: GaugeFrames) -> "TangentField":
        return cls(frames.project(np.asarray(vectors, dtype=float)), frames)


def _heat_apply(matrix: sparse.csr_matrix, state: np.ndarray, tau: float,
                method: str, substeps: int) -> np.ndarray:
    """exp(-M tau) applied to columns of state."""
    if tau < 0:
        raise ValueError("diffusion time must be nonnegative")
    if tau == 0:
        return state.copy()
    size = matrix.shape[0]
    if method == "auto":
        method = "exact" if size <= HEAT_DENSE_SIZE else "implicit"
    if method == "exact":
        vals, vecs = np.linalg.eigh(matrix.toarray())
        return vecs @ (np.exp(-vals * tau)[:, None] * (vecs.T @ state))
    if method == "implicit":
        # unconditionally stable implicit Euler substeps
        step = tau / substeps
        solver = splu((sparse.identity(size, format="csc") + step * matrix.tocsc()))
        out = state.copy()
        for _ in range(substeps):
            out = solver.solve(out)
        return out
    raise ValueError(f"unknown heat method {method!r}")


def scalar_heat(laplacian: GraphLaplacian, u0: np.ndarray, tau: float,
                method: str = "auto", substeps: int = 100) -> np.ndarray:
    """Scalar heat flow u(tau) = exp(-L tau) u0.

    The exact path expands in the dense eigenbasis and preserves total mass;
    the implicit path uses `substeps` backward-Euler steps.
    """
    u0 = np.asarray(u0, dtype=float).reshape(-1)
    if u0.shape[0] != laplacian.n:
        raise ValueError("initial condition has wrong length")
    return _heat_apply(laplacian.matrix, u0[:, None], tau, method, substeps)[:, 0]


def vector_diffusion(connection: ConnectionLaplacian, coords: np.ndarray, tau: float,
                     method: str = "auto", substeps: int = 100) -> np.ndarray:
    """Raw vector heat flow exp(-L_c tau) applied to stacked tangent coordinates."""
    coords = np.asarray(coords, dtype=float)
    n, m = connection.n, connection.m
    if coords.shape != (n, m):
        raise ValueError(f"coords must have shape {(n, m)}")
    flat = coords.reshape(n * m, 1)
    return _heat_apply(connection.matrix, flat, tau, method, substeps).reshape(n, m)


@dataclass(frozen=True)
class VectorHeatResult:
    field: TangentField
    magnitudes: np.ndarray  # scalar-diffused per-node norms
    direction_norms: np.ndarray  # norms of the raw diffused directions
    singular: np.ndarray  # bool mask of singularity candidates


def vector_heat(connection: ConnectionLaplacian, laplacian: GraphLaplacian,
                field0: TangentField, tau: float, method: str = "auto",
                substeps: int = 100) -> VectorHeatResult:
    """Vector heat method: diffused directions with scalar-diffused magnitudes.

    result_i = v(tau)_i / |v(tau)_i| * u(tau)_i where v solves the vector
    heat equation and u diffuses the initial per-node norms. Nodes where the
    diffused direction norm falls below ``SINGULARITY_NORM_TOL`` are flagged
    as singularity candidates; their coordinates are zeroed (direction
    undefined) and callers should exclude them from alignment metrics. The
    scalar-diffused magnitude for those nodes remains in ``magnitudes``.
    """
    coords = vector_diffusion(connection, field0.coords, tau, method, substeps)
    mags0 = np.linalg.norm(field0.coords, axis=1)
    mags = scalar_heat(laplacian, mags0, tau, method, substeps)
    dnorms = np.linalg.norm(coords, axis=1)
    singular = dnorms < SINGULARITY_NORM_TOL
    safe = np.where(singular, 1.0, dnorms)
    out = coords / safe[:, None] * mags[:, None]
    out[singular] = 0.0
    return VectorHeatResult(
        field=TangentField(out, field0.frames),
        magnitudes=mags,
        direction_norms=dnorms,
        singular=singular,
    )


@dataclass(frozen=True)
class GeneratedField:
    field: TangentField
    anchors: np.ndarray
    spacing: float
    singular: np.ndarray
    direction_norms: np.ndarray


def generate_experiment_field(cloud: PointCloud, frames: GaugeFrames,
                              connection: ConnectionLaplacian,
                              laplacian: GraphLaplacian, anchor_count: int,
                              seed: int, tau: float = 100.0,
                              method: str = "auto", substeps: int = 100
                              ) -> GeneratedField:
    """Smooth random ground-truth field: furthest-point anchors seeded with
    uniform unit vectors, projected to tangent spaces and diffused to tau.

    Deterministic for a fixed seed.
    """
    anchors, spacing = furthest_point_sample(cloud, anchor_count)
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((anchors.shape[0], cloud.dim))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    coords0 = np.zeros((cloud.n, frames.m))
    for a, i in enumerate(anchors):
        coords0[i] = frames.frames[i].T @ raw[a]
    result = vector_heat(connection, laplacian, TangentField(coords0, frames), tau,
                         method, substeps)
    return GeneratedField(
        field=result.field,
        anchors=anchors,
        spacing=spacing,
        singular=result.singular,
        direction_norms=result.direction_norms,
    )


def baseline_scalar_rbf_predict(spectrum: Spectrum, train_nodes: np.ndarray,
                                train_vectors: np.ndarray, query_nodes: np.ndarray,
                                hyperparams: gp.MaternHyperparams) -> np.ndarray:
    """Channel-wise scalar GP baseline on graph-Laplacian positional encodings.

    Each ambient channel is regressed independently with the nu = inf
    (squared-exponential) spectral filter. Predictions are NOT projected to
    tangent spaces, so they can protrude from the surface; that failure mode
    is the point of the baseline.
    """
    if spectrum.m != 1:
        raise ValueError("baseline needs a scalar (graph-Laplacian) spectrum")
    hp = replace(hyperparams, nu=np.inf)
    frames1 = scalar_frames(spectrum.n)
    train_vectors = np.asarray(train_vectors, dtype=float)
    query_nodes = np.asarray(query_nodes, dtype=np.int64).reshape(-1)
    out = np.empty((query_nodes.shape[0], train_vectors.shape[1]))
    for channel in range(train_vectors.shape[1]):
        model = gp.fit(train_nodes, train_vectors[:, channel:channel + 1],
                       spectrum, frames1, hp)
        mean, _ = gp.predict(model, query_nodes)
        out[:, channel] = mean[:, 0]
    return out


def fit_baseline_hyperparameters(spectrum: Spectrum, train_nodes: np.ndarray,
                                 train_vectors: np.ndarray,
                                 search: gp.SearchConfig | None = None,
                                 seed: int = 0,
                                 initial: gp.MaternHyperparams | None = None,
                                 ) -> gp.MaternHyperparams:
    """Shared (sigma, kappa, sigma_n) for the channel-wise baseline by
    maximizing the summed per-channel log marginal likelihood (nu = inf)."""
    if spectrum.m != 1:
        raise ValueError("baseline needs a scalar (graph-Laplacian) spectrum")
    if search is None:
        search = gp.SearchConfig()
    train_nodes = np.asarray(train_nodes, dtype=np.int64).reshape(-1)
    train_vectors = np.asarray(train_vectors, dtype=float)
    frames1 = scalar_frames(spectrum.n)

    def objective(theta):
        try:
            hp = gp.MaternHyperparams(sigma=math.exp(theta[0]),
                                      kappa=math.exp(theta[1]), nu=np.inf,
                                      sigma_n=math.exp(theta[2]))
            total = 0.0
            for channel in range(train_vectors.shape[1]):
                model = gp.fit(train_nodes, train_vectors[:, channel:channel + 1],
                               spectrum, frames1, hp)
                total += gp.log_marginal_likelihood(model)
        except (gp.GramConditioningError, np.linalg.LinAlgError, ValueError,
                FloatingPointError, OverflowError):
            return -np.inf
        return total if np.isfinite(total) else -np.inf

    start = None
    if initial is not None:
        start = np.array([math.log(initial.sigma), math.log(initial.kappa),
                          math.log(max(initial.sigma_n, 1e-12))])
    best = gp.coordinate_search(objective, search, seed, start)
    return gp.MaternHyperparams(sigma=math.exp(best[0]), kappa=math.exp(best[1]),
                                nu=np.inf, sigma_n=math.exp(best[2]))


@dataclass(frozen=True)
class MetricResult:
    """A scalar metric plus how many nodes entered and were excluded."""

    metric: str
    value: float
    n_nodes: int
    n_excluded: int

    def to_dict(self) -> dict:
        return {"metric": self.metric, "value": self.value,
                "n_nodes": self.n_nodes, "n_excluded": self.n_excluded}


def _cosines(predicted: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, int]:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ValueError("prediction/truth shape mismatch")
    pn = np.linalg.norm(predicted, axis=1)
    tn = np.linalg.norm(truth, axis=1)
    keep = (pn > ZERO_NORM_TOL) & (tn > ZERO_NORM_TOL)
    excluded = int((~keep).sum())
    # 1 - |p/|p| - t/|t||^2 / 2 equals the cosine and is exact for p == t
    diff = predicted[keep] / pn[keep, None] - truth[keep] / tn[keep, None]
    dots = 1.0 - 0.5 * np.sum(diff * diff, axis=1)
    return np.clip(dots, -1.0, 1.0), excluded


def alignment_score(predicted: np.ndarray, truth: np.ndarray) -> MetricResult:
    """Mean normalized inner product between prediction and truth, in [-1, 1].

    Nodes where either side has (near-)zero norm are excluded and counted;
    zero-norm truth rows arise at flagged singularities of generated fields.
    """
    cos, excluded = _cosines(predicted, truth)
    if cos.size == 0:
        raise ValueError("no nodes left after zero-norm exclusion")
    return MetricResult("alignment", float(cos.mean()), predicted.shape[0], excluded)


def angular_error(predicted: np.ndarray, truth: np.ndarray) -> MetricResult:
    """Mean absolute angle (radians) between prediction and truth."""
    cos, excluded = _cosines(predicted, truth)
    if cos.size == 0:
        raise ValueError("no nodes left after zero-norm exclusion")
    return MetricResult("angular_error", float(np.arccos(cos).mean()),
                        predicted.shape[0], excluded)


def out_of_tangent_magnitude(predicted: np.ndarray, frames: GaugeFrames,
                             nodes: np.ndarray) -> MetricResult:
    """Mean norm of the component of each prediction outside its tangent plane."""
    predicted = np.asarray(predicted, dtype=float)
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
    sub = frames.frames[nodes]  # (q, d, m)
    inplane = np.einsum("qdm,qem,qe->qd", sub, sub, predicted)
    resid = np.linalg.norm(predicted - inplane, axis=1)
    return MetricResult("out_of_tangent", float(resid.mean()), nodes.shape[0], 0)


def boundary_angular_jump(graph: ProximityGraph, transports: TransportMaps,
                          frames: GaugeFrames, vectors: np.ndarray,
                          mask: np.ndarray) -> MetricResult:
    """Max angle across mask-boundary edges against the transported neighbour.

    For each edge with exactly one masked endpoint, the vector at the masked
    node (a raw prediction, possibly off-tangent) is compared with the
    unmasked neighbour's value parallel-transported into the masked node's
    tangent plane. Transporting the reference removes the ambient rotation
    between neighbouring tangent planes, so a smooth in-surface field scores
    low and genuine discontinuities or protrusions score high. Edges with a
    (near-)zero vector on either side are excluded and counted.
    """
    vectors = np.asarray(vectors, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    boundary = mask[graph.edges[:, 0]] != mask[graph.edges[:, 1]]
    edges = graph.edges[boundary]
    if edges.shape[0] == 0:
        raise ValueError("mask has no boundary edges")
    worst = -1.0
    excluded = 0
    for i, j in edges:
        i, j = int(i), int(j)
        if not mask[i]:
            i, j = j, i  # i is the masked (predicted) endpoint
        pred = vectors[i]
        coords_j = frames.frames[j].T @ vectors[j]
        reference = frames.frames[i] @ (transports.into(i, j) @ coords_j)
        np_, nr = np.linalg.norm(pred), np.linalg.norm(reference)
        if np_ <= ZERO_NORM_TOL or nr <= ZERO_NORM_TOL:
            excluded += 1
            continue
        diff = pred / np_ - reference / nr
        angle = math.acos(min(1.0, max(-1.0, 1.0 - 0.5 * float(diff @ diff))))
        worst = max(worst, angle)
    if worst < 0:
        raise ValueError("all boundary edges excluded by zero norms")
    return MetricResult("boundary_max_angular_jump", worst,
                        edges.shape[0], excluded)


def direction_coherence(graph: ProximityGraph, transports: TransportMaps,
                        coords: np.ndarray) -> np.ndarray:
    """Per-node norm of the transport-averaged neighbourhood direction.

    Near a vortex-style singularity the transported unit directions wind and
    cancel, so low coherence marks singularity candidates in a field whose
    magnitudes were renormalized.
    """
    coords = np.asarray(coords, dtype=float)
    norms = np.linalg.norm(coords, axis=1)
    units = np.where(norms[:, None] > ZERO_NORM_TOL, coords / np.maximum(norms, 1e-300)[:, None], 0.0)
    acc = np.zeros_like(coords)
    counts = np.zeros(graph.n)
    for i, j in graph.edges:
        i, j = int(i), int(j)
        acc[i] += transports.into(i, j) @ units[j]
        acc[j] += transports.into(j, i) @ units[i]
        counts[i] += 1
        counts[j] += 1
    counts = np.maximum(counts, 1.0)
    return np.linalg.norm(acc / counts[:, None], axis=1)
