"""Discrete approximation of a latent manifold from point samples.

Builds proximity graphs over point clouds, subsamples them with greedy
furthest-point selection, estimates per-node orthonormal tangent frames,
and computes the orthogonal transport maps that align neighbouring frames
(a discrete Levi-Civita connection via Procrustes alignment).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

__all__ = [
    "PointCloud",
    "ProximityGraph",
    "GaugeFrames",
    "TransportMaps",
    "DuplicatePointsError",
    "DisconnectedGraphError",
    "DisconnectedGraphWarning",
    "DegenerateNeighborhoodError",
    "TransportRankError",
    "build_knn_graph",
    "build_mesh_graph",
    "furthest_point_sample",
    "estimate_tangent_frames",
    "estimate_intrinsic_dim",
    "project_to_tangent",
    "tangent_to_ambient",
    "compute_transport",
    "compute_transports",
    "mean_edge_length",
]

# Orthonormality tolerance for frames and transports.
ORTHO_TOL = 1e-10


class DuplicatePointsError(ValueError):
    """Two sample points coincide; zero-length edge vectors break frame estimation."""


class DisconnectedGraphError(ValueError):
    """The proximity graph splits into more than one connected component."""


class DisconnectedGraphWarning(UserWarning):
    """Reported instead of :class:`DisconnectedGraphError` when configured to warn."""


class DegenerateNeighborhoodError(ValueError):
    """A node's neighbourhood does not span the requested tangent dimension."""


class TransportRankError(ValueError):
    """Two tangent spaces are (numerically) orthogonal; the graph is too coarse."""


def _find_duplicate_rows(points: np.ndarray) -> tuple[int, int] | None:
    order = np.lexsort(points.T[::-1])
    eq = np.all(points[order[1:]] == points[order[:-1]], axis=1)
    hits = np.nonzero(eq)[0]
    if hits.size == 0:
        return None
    a, b = order[hits[0]], order[hits[0] + 1]
    return (min(a, b), max(a, b))


@dataclass(frozen=True)
class PointCloud:
    """Sample positions in ambient space, optionally with one vector per point.

    points : (n, d) array of ambient coordinates.
    vectors : optional (n, d) array, one ambient vector per point.
    """

    points: np.ndarray
    vectors: np.ndarray | None = None

    def __post_init__(self):
        points = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        if points.ndim != 2:
            raise ValueError("points must be an (n, d) array")
        n, d = points.shape
        if n < 2:
            raise ValueError(f"need at least 2 points, got {n}")
        if d < 2:
            raise ValueError(f"need ambient dimension >= 2, got {d}")
        if not np.isfinite(points).all():
            bad = np.argwhere(~np.isfinite(points))[0]
            raise ValueError(f"non-finite coordinate at point {bad[0]}, column {bad[1]}")
        dup = _find_duplicate_rows(points)
        if dup is not None:
            raise DuplicatePointsError(f"points {dup[0]} and {dup[1]} coincide")
        object.__setattr__(self, "points", points)
        if self.vectors is not None:
            vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=float))
            if vectors.shape != (n, d):
                raise ValueError(
                    f"vectors must have shape {(n, d)}, got {vectors.shape}"
                )
            if not np.isfinite(vectors).all():
                bad = np.argwhere(~np.isfinite(vectors))[0]
                raise ValueError(f"non-finite vector entry at point {bad[0]}")
            object.__setattr__(self, "vectors", vectors)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class ProximityGraph:
    """Weighted undirected graph approximating the manifold.

    edges : (E, 2) int array with i < j per row, no duplicates, no self-loops.
    weights : (E,) nonnegative weights, symmetric by construction.
    """

    n: int
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if edges.shape[0] != weights.shape[0]:
            raise ValueError("edges and weights length mismatch")
        if edges.size and (edges.min() < 0 or edges.max() >= self.n):
            raise ValueError("edge endpoint out of range")
        if np.any(edges[:, 0] >= edges[:, 1]):
            raise ValueError("edges must satisfy i < j (no self-loops)")
        if np.any(weights < 0) or not np.isfinite(weights).all():
            raise ValueError("weights must be finite and nonnegative")
        # canonical order for determinism
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
        weights = weights[order]
        if edges.shape[0] > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
            raise ValueError("duplicate edges")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)
        if np.any(self.degrees <= 0):
            i = int(np.argmin(self.degrees))
            raise ValueError(f"node {i} has zero degree")

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n)
        np.add.at(deg, self.edges[:, 0], self.weights)
        np.add.at(deg, self.edges[:, 1], self.weights)
        return deg

    @cached_property
    def neighbor_lists(self) -> list[np.ndarray]:
        nbrs: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [np.array(sorted(v), dtype=np.int64) for v in nbrs]

    def weight_matrix(self) -> sparse.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = sparse.coo_matrix(
            (np.concatenate([self.weights, self.weights]),
             (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        )
        return w.tocsr()

    def n_components(self) -> int:
        ncomp, _ = csgraph.connected_components(self.weight_matrix(), directed=False)
        return int(ncomp)

    def is_connected(self) -> bool:
        return self.n_components() == 1


def _edge_weights(points: np.ndarray, edges: np.ndarray, weighting: str,
                  bandwidth: float | None) -> np.ndarray:
    if weighting == "unit":
        return np.ones(edges.shape[0])
    if weighting == "gaussian":
        if bandwidth is None or bandwidth <= 0:
            raise ValueError("gaussian weighting requires bandwidth > 0")
        d2 = np.sum((points[edges[:, 0]] - points[edges[:, 1]]) ** 2, axis=1)
        return np.exp(-d2 / bandwidth**2)
    raise ValueError(f"unknown weighting {weighting!r}")


def _check_connectivity(graph: ProximityGraph, on_disconnected: str) -> None:
    ncomp = graph.n_components()
    if ncomp == 1:
        return
    msg = f"proximity graph has {ncomp} connected components"
    if on_disconnected == "error":
        raise DisconnectedGraphError(msg)
    if on_disconnected == "warn":
        warnings.warn(msg, DisconnectedGraphWarning)
    else:
        raise ValueError(f"unknown on_disconnected policy {on_disconnected!r}")


def build_knn_graph(cloud: PointCloud, k_neighbors: int, weighting: str = "unit",
                    bandwidth: float | None = None,
                    on_disconnected: str = "error") -> ProximityGraph:
    """k-nearest-neighbour graph, symmetrized by union of directed selections.

    Weights are 1 for ``weighting="unit"`` or exp(-|xi-xj|^2 / bandwidth^2)
    for ``weighting="gaussian"``.
    """
    points = cloud.points
    n = cloud.n
    if not 1 <= k_neighbors < n:
        raise ValueError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k_neighbors + 1)
    idx = np.atleast_2d(idx)
    src = np.repeat(np.arange(n), k_neighbors)
    dst = idx[:, 1:].reshape(-1)  # column 0 is the point itself (duplicates rejected)
    pairs = np.sort(np.stack([src, dst], axis=1), axis=1)
    edges = np.unique(pairs, axis=0)
    weights = _edge_weights(points, edges, weighting, bandwidth)
    graph = ProximityGraph(n=n, edges=edges, weights=weights)
    _check_connectivity(graph, on_disconnected)
    return graph


def build_mesh_graph(cloud: PointCloud, faces: np.ndarray, weighting: str = "unit",
                     bandwidth: float | None = None,
                     on_disconnected: str = "error") -> ProximityGraph:
    """Graph whose edges are the triangle edges of a mesh over the cloud."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces.size == 0:
        raise ValueError("mesh has no faces")
    if faces.min() < 0 or faces.max() >= cloud.n:
        raise ValueError("face vertex index out of range")
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [0, 2]]])
    pairs = np.sort(pairs, axis=1)
    edges = np.unique(pairs, axis=0)
    weights = _edge_weights(cloud.points, edges, weighting, bandwidth)
    graph = ProximityGraph(n=cloud.n, edges=edges, weights=weights)
    _check_connectivity(graph, on_disconnected)
    return graph


def _max_pairwise_distance(points: np.ndarray, chunk: int = 512) -> float:
    best = 0.0
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        d2 = np.sum((block[:, None, :] - points[None, :, :]) ** 2, axis=2)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def furthest_point_sample(cloud: PointCloud | np.ndarray, count: int
                          ) -> tuple[np.ndarray, float]:
    """Greedy max-min subsample starting from index 0.

    Returns the selected indices (in selection order) and the achieved
    relative spacing: mean distance from each selected point to its nearest
    selected neighbour, divided by the diameter of the full cloud.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    n = len(points)
    if not 1 <= count <= n:
        raise ValueError(f"count must be in [1, {n}], got {count}")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    for t in range(1, count):
        nxt = int(np.argmax(dist))
        selected[t] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    if count == 1:
        return selected, 0.0
    sel_pts = points[selected]
    d2 = np.sum((sel_pts[:, None, :] - sel_pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = np.sqrt(d2.min(axis=1))
    spacing = float(nearest.mean() / _max_pairwise_distance(points))
    return selected, spacing


@dataclass(frozen=True)
class GaugeFrames:
    """Per-node orthonormal tangent frames, shape (n, d, m).

    Column vectors of ``frames[i]`` span the estimated tangent space at node
    i. The basis choice is an arbitrary gauge; downstream constructions are
    covariant under per-node rotations of it.
    """

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 3:
            raise ValueError("frames must have shape (n, d, m)")
        n, d, m = frames.shape
        if not 1 <= m <= d:
            raise ValueError(f"need 1 <= m <= d, got m={m}, d={d}")
        gram = np.einsum("ndm,ndk->nmk", frames, frames)
        err = np.abs(gram - np.eye(m)).max(axis=(1, 2))
        if err.max() > ORTHO_TOL * 10:
            i = int(np.argmax(err))
            raise ValueError(f"frame at node {i} is not orthonormal (err={err[i]:.2e})")
        object.__setattr__(self, "frames", frames)

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def m(self) -> int:
        return self.frames.shape[2]

    def project(self, vectors: np.ndarray) -> np.ndarray:
        """Tangent coordinates of per-node ambient vectors, (n, d) -> (n, m)."""
        return np.einsum("ndm,nd->nm", self.frames, vectors)

    def to_ambient(self, coords: np.ndarray) -> np.ndarray:
        """Ambient form of per-node tangent coordinates, (n, m) -> (n, d)."""
        return np.einsum("ndm,nm->nd", self.frames, coords)


def project_to_tangent(frames: GaugeFrames, i: int, v: np.ndarray) -> np.ndarray:
    """Least-squares coordinates of ambient vector v in the frame at node i."""
    return frames.frames[i].T @ np.asarray(v, dtype=float)


def tangent_to_ambient(frames: GaugeFrames, i: int, v_hat: np.ndarray) -> np.ndarray:
    return frames.frames[i] @ np.asarray(v_hat, dtype=float)


def _graph_neighborhood(i: int, size: int, neighbor_lists: list[np.ndarray],
                        points: np.ndarray) -> list[int]:
    # breadth-first rings; within a ring order by distance then index
    seen = {i}
    out: list[int] = []
    frontier = [i]
    while frontier and len(out) < size:
        ring: set[int] = set()
        for u in frontier:
            ring.update(int(v) for v in neighbor_lists[u] if v not in seen)
        if not ring:
            break
        ordered = sorted(ring, key=lambda v: (np.linalg.norm(points[v] - points[i]), v))
        out.extend(ordered)
        seen.update(ring)
        frontier = ordered
    return out[:size]


def _fix_column_signs(mat: np.ndarray) -> np.ndarray:
    # sign convention: largest-magnitude entry of each column positive
    out = mat.copy()
    for c in range(out.shape[1]):
        r = int(np.argmax(np.abs(out[:, c])))
        if out[r, c] < 0:
            out[:, c] = -out[:, c]
    return out


def auto_frame_neighbors(degree: float, m: int, n: int) -> int:
    """Default neighbourhood size for frame estimation: 2*round(degree),
    clamped to [m, n-1]."""
    return int(np.clip(2 * round(float(degree)), m, n - 1))


def estimate_tangent_frames(graph: ProximityGraph, cloud: PointCloud, m: int,
                            n_neighbors: int | str = "auto") -> GaugeFrames:
    """Estimate an orthonormal d x m tangent frame at every node.

    Edge vectors to the node's nearest graph neighbours are stacked
    column-wise; the left singular vectors of the m largest singular values
    give the frame. ``n_neighbors="auto"`` uses ``auto_frame_neighbors`` on
    the node degree.
    """
    d = cloud.dim
    n = cloud.n
    if graph.n != n:
        raise ValueError("graph and cloud size mismatch")
    if not 1 <= m <= d:
        raise ValueError(f"need 1 <= m <= d={d}, got m={m}")
    if isinstance(n_neighbors, str):
        if n_neighbors != "auto":
            raise ValueError(f"n_neighbors must be an int or 'auto', got {n_neighbors!r}")
    elif n_neighbors < m:
        raise ValueError(f"n_neighbors must be >= m={m}")
    points = cloud.points
    nbr_lists = graph.neighbor_lists
    frames = np.empty((n, d, m))
    for i in range(n):
        if n_neighbors == "auto":
            size = auto_frame_neighbors(graph.degrees[i], m, n)
        else:
            size = int(n_neighbors)
        nbrs = _graph_neighborhood(i, size, nbr_lists, points)
        if len(nbrs) < m:
            raise DegenerateNeighborhoodError(
                f"node {i}: only {len(nbrs)} reachable neighbours, need >= {m}"
            )
        edge_vecs = (points[nbrs] - points[i]).T  # d x N
        u, s, _ = np.linalg.svd(edge_vecs, full_matrices=False)
        rank_tol = s[0] * max(edge_vecs.shape) * np.finfo(float).eps
        if s.shape[0] < m or s[m - 1] <= rank_tol:
            raise DegenerateNeighborhoodError(
                f"node {i}: neighbourhood rank < {m} (degenerate local geometry)"
            )
        frames[i] = _fix_column_signs(u[:, :m])
    return GaugeFrames(frames)


def estimate_intrinsic_dim(graph: ProximityGraph, cloud: PointCloud,
                           n_neighbors: int | str = "auto",
                           gap_ratio: float = 0.5) -> int:
    """Heuristic intrinsic dimension from per-node singular-value gaps.

    For each node, m_i is the first index where the singular value drops
    below ``gap_ratio`` times its predecessor; the median over nodes is
    returned. This is advisory only and is never applied implicitly:
    frame estimation always takes an explicit m.
    """
    points = cloud.points
    nbr_lists = graph.neighbor_lists
    dims = np.empty(cloud.n, dtype=np.int64)
    for i in range(cloud.n):
        if n_neighbors == "auto":
            size = auto_frame_neighbors(graph.degrees[i], 1, cloud.n)
        else:
            size = int(n_neighbors)
        nbrs = _graph_neighborhood(i, size, nbr_lists, points)
        s = np.linalg.svd((points[nbrs] - points[i]).T, compute_uv=False)
        m_i = len(s)
        for l in range(1, len(s)):
            if s[l] < gap_ratio * s[l - 1]:
                m_i = l
                break
        dims[i] = m_i
    return int(round(float(np.median(dims))))


def compute_transport(frames: GaugeFrames, j: int, i: int) -> np.ndarray:
    """Orthogonal matrix O minimizing ||T_i - T_j O||_F (Procrustes/SVD).

    The full orthogonal group is allowed (rotations and reflections). Raises
    :class:`TransportRankError` when the two tangent spaces are numerically
    orthogonal, which signals that the graph is too coarse.
    """
    if i == j:
        raise ValueError("transport requires two distinct nodes")
    M = frames.frames[j].T @ frames.frames[i]
    u, s, vt = np.linalg.svd(M)
    if s[-1] < 1e-10:
        raise TransportRankError(
            f"tangent spaces at nodes {j} and {i} are nearly orthogonal "
            f"(min singular value {s[-1]:.2e}); graph too coarse"
        )
    return u @ vt


@dataclass(frozen=True)
class TransportMaps:
    """Per-edge parallel transport maps between tangent frames.

    ``into(i, j)`` returns the m x m orthogonal matrix taking tangent
    coordinates at node j into the frame at node i; ``into(i, j)`` equals
    ``into(j, i).T``. Stored once per undirected edge under the key (i, j)
    with i < j.
    """

    maps: dict[tuple[int, int], np.ndarray]

    def into(self, i: int, j: int) -> np.ndarray:
        if i < j:
            return self.maps[(i, j)]
        return self.maps[(j, i)].T

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.maps


def compute_transports(graph: ProximityGraph, frames: GaugeFrames) -> TransportMaps:
    """Transport maps for every graph edge.

    For edge (i, j) the stored matrix maps coordinates at j into the frame
    at i: it is the Procrustes alignment of T_j onto T_i.
    """
    maps = {}
    for i, j in graph.edges:
        # argmin_O ||T_j - T_i O|| maps j-coordinates into i's frame
        maps[(int(i), int(j))] = compute_transport(frames, int(i), int(j))
    return TransportMaps(maps)


def mean_edge_length(graph: ProximityGraph, cloud: PointCloud) -> float:
    diffs = cloud.points[graph.edges[:, 0]] - cloud.points[graph.edges[:, 1]]
    return float(np.linalg.norm(diffs, axis=1).mean())
