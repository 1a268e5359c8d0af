"""Graph and connection Laplacians, their low-end spectra, and positional encodings.

The connection Laplacian acts on the discrete tangent bundle: an nm x nm
block operator with diagonal blocks D_ii * I and off-diagonal blocks
-w_ij * O_ij for adjacent nodes, where O_ij transports coordinates at j into
the frame at i. With this sign convention parallel fields span its null
space and its quadratic form is the vector Dirichlet energy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .geometry import GaugeFrames, ProximityGraph, TransportMaps

__all__ = [
    "GraphLaplacian",
    "ConnectionLaplacian",
    "Spectrum",
    "EigensolverError",
    "assemble_graph_laplacian",
    "assemble_connection_laplacian",
    "eigendecompose",
    "truncate",
    "positional_encoding",
    "positional_encodings",
    "scalar_frames",
    "dirichlet_energy",
    "DENSE_FALLBACK_SIZE",
]

# dense eigendecomposition below this operator size
DENSE_FALLBACK_SIZE = 2000
RESIDUAL_TOL = 1e-8
DEGENERATE_GAP = 1e-8


class EigensolverError(RuntimeError):
    """Iterative eigensolver failed to converge or residuals exceed tolerance."""


@dataclass(frozen=True)
class GraphLaplacian:
    """Sparse symmetric L = D - W over graph nodes."""

    matrix: sparse.csr_matrix
    n: int

    @property
    def m(self) -> int:
        return 1

    @property
    def size(self) -> int:
        return self.n


@dataclass(frozen=True)
class ConnectionLaplacian:
    """Sparse symmetric block operator on the tangent bundle, shape (nm, nm)."""

    matrix: sparse.csr_matrix
    n: int
    m: int

    @property
    def size(self) -> int:
        return self.n * self.m


def assemble_graph_laplacian(graph: ProximityGraph) -> GraphLaplacian:
    """L = diag(W 1) - W."""
    lap = sparse.diags(graph.degrees) - graph.weight_matrix()
    return GraphLaplacian(matrix=lap.tocsr(), n=graph.n)


def assemble_connection_laplacian(graph: ProximityGraph, frames: GaugeFrames,
                                  transports: TransportMaps) -> ConnectionLaplacian:
    """Block operator with D_ii * I on the diagonal and -w_ij * O_ij off it.

    Symmetry holds by construction because O_ji = O_ij^T. Raises KeyError
    via the transport set if an edge has no transport map.
    """
    n, m = graph.n, frames.m
    if frames.n != n:
        raise ValueError("graph and frames size mismatch")
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    brow, bcol = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    brow, bcol = brow.ravel(), bcol.ravel()

    def add_block(bi: int, bj: int, block: np.ndarray) -> None:
        rows.append(bi * m + brow)
        cols.append(bj * m + bcol)
        vals.append(block.ravel())

    eye = np.eye(m)
    for i in range(n):
        add_block(i, i, graph.degrees[i] * eye)
    for (i, j), w in zip(graph.edges, graph.weights):
        i, j = int(i), int(j)
        if not transports.has_edge(i, j):
            raise ValueError(f"missing transport for edge ({i}, {j})")
        o_ij = transports.into(i, j)
        add_block(i, j, -w * o_ij)
        add_block(j, i, -w * o_ij.T)
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * m, n * m),
    )
    return ConnectionLaplacian(matrix=mat.tocsr(), n=n, m=m)


@dataclass(frozen=True)
class Spectrum:
    """The k smallest eigenpairs of a Laplacian, eigenvalues ascending.

    Eigenvectors are columns of an orthonormal (size, k) matrix with the
    sign convention that each column's largest-magnitude entry is positive.
    ``next_eigenvalue`` (the (k+1)-th, when available) lets callers detect a
    cut through a degenerate eigenvalue cluster.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    n: int
    m: int
    next_eigenvalue: float | None = None

    @property
    def k(self) -> int:
        return self.eigenvalues.shape[0]

    def splits_degenerate_cluster(self, gap: float = DEGENERATE_GAP) -> bool:
        if self.next_eigenvalue is None or self.k == 0:
            return False
        return (self.next_eigenvalue - self.eigenvalues[-1]) < gap


def _operator_fro_norm(mat: sparse.csr_matrix) -> float:
    return float(np.sqrt((mat.data**2).sum()))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for c in range(out.shape[1]):
        r = int(np.argmax(np.abs(out[:, c])))
        if out[r, c] < 0:
            out[:, c] = -out[:, c]
    return out


def eigendecompose(operator: GraphLaplacian | ConnectionLaplacian, k: int,
                   method: str = "auto", seed: int = 0, tol: float = 1e-10,
                   maxiter: int | None = None) -> Spectrum:
    """k smallest eigenpairs of a symmetric PSD Laplacian.

    ``method`` is "dense", "lanczos", or "auto" (dense when the operator
    size is at most ``DENSE_FALLBACK_SIZE``). The Lanczos path runs ARPACK
    on the spectrally flipped operator c*I - L (c a Gershgorin bound), which
    needs no shift-invert factorization; its start vector is seeded, so
    results are deterministic for a fixed seed.
    """
    mat = operator.matrix
    size = mat.shape[0]
    if not 1 <= k <= size:
        raise ValueError(f"k must be in [1, {size}], got {k}")
    if method == "auto":
        method = "dense" if size <= DENSE_FALLBACK_SIZE else "lanczos"
    if method == "lanczos" and k > size - 2:
        method = "dense"  # ARPACK needs k < size - 1

    k_req = min(k + 1, size)  # one extra pair to report the gap at the cut
    if method == "dense":
        vals, vecs = np.linalg.eigh(mat.toarray())
        vals, vecs = vals[:k_req], vecs[:, :k_req]
    elif method == "lanczos":
        gershgorin = float(np.max(np.abs(mat).sum(axis=1)))
        shifted = (sparse.identity(size, format="csr") * gershgorin - mat).tocsr()
        rng = np.random.default_rng(seed)
        v0 = rng.standard_normal(size)
        v0 /= np.linalg.norm(v0)
        if maxiter is None:
            maxiter = 10 * size
        k_req = min(k_req, size - 2)
        try:
            mu, vecs = eigsh(shifted, k=k_req, which="LA", v0=v0, tol=tol,
                             maxiter=maxiter)
        except ArpackNoConvergence as exc:
            raise EigensolverError(
                f"Lanczos failed to converge after {maxiter} iterations: "
                f"{len(exc.eigenvalues)} of {k_req} pairs converged"
            ) from exc
        vals = gershgorin - mu
        order = np.argsort(vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
    else:
        raise ValueError(f"unknown method {method!r}")

    # residual gate, relative to the operator's Frobenius norm
    fro = _operator_fro_norm(mat)
    resid = np.linalg.norm(mat @ vecs[:, :k] - vecs[:, :k] * vals[:k], axis=0)
    worst = float(resid.max())
    if worst > RESIDUAL_TOL * max(fro, 1e-300):
        raise EigensolverError(
            f"eigenpair residual {worst:.3e} exceeds {RESIDUAL_TOL:.0e} * |L|_F = "
            f"{RESIDUAL_TOL * fro:.3e}"
        )

    lam_max = float(vals.max()) if vals.size else 0.0
    floor = -1e-8 * max(lam_max, 1.0)
    if vals.min() < floor:
        raise EigensolverError(
            f"operator is not PSD: eigenvalue {vals.min():.3e} below tolerance"
        )
    vals = np.clip(vals, 0.0, None)

    next_val = float(vals[k]) if vals.shape[0] > k else None
    return Spectrum(
        eigenvalues=vals[:k],
        eigenvectors=_fix_signs(vecs[:, :k]),
        n=operator.n,
        m=operator.m,
        next_eigenvalue=next_val,
    )


def truncate(spectrum: Spectrum, k: int) -> Spectrum:
    """Restrict a spectrum to its k lowest pairs (for eigenvector-count sweeps)."""
    if not 1 <= k <= spectrum.k:
        raise ValueError(f"k must be in [1, {spectrum.k}], got {k}")
    next_val = (float(spectrum.eigenvalues[k]) if k < spectrum.k
                else spectrum.next_eigenvalue)
    return Spectrum(
        eigenvalues=spectrum.eigenvalues[:k],
        eigenvectors=spectrum.eigenvectors[:, :k],
        n=spectrum.n,
        m=spectrum.m,
        next_eigenvalue=next_val,
    )


def scalar_frames(n: int) -> GaugeFrames:
    """Unit frames for the trivial line bundle (scalar signals, m = d = 1)."""
    return GaugeFrames(np.ones((n, 1, 1)))


def positional_encodings(spectrum: Spectrum, frames: GaugeFrames) -> np.ndarray:
    """All positional encodings, shape (n, d, k).

    Node i's encoding is T_i times its m-row slice of the eigenvector
    matrix, the rows i*m .. (i+1)*m - 1, scaled by sqrt(n*m).
    """
    n, m = spectrum.n, spectrum.m
    if frames.n != n or frames.m != m:
        raise ValueError("spectrum and frames disagree on (n, m)")
    scaled = spectrum.eigenvectors * np.sqrt(n * m)
    blocks = scaled.reshape(n, m, spectrum.k)
    return np.einsum("ndm,nmk->ndk", frames.frames, blocks)


def positional_encoding(spectrum: Spectrum, frames: GaugeFrames, i: int) -> np.ndarray:
    """Single-node encoding P_i = T_i @ (sqrt(nm) * U[i*m:(i+1)*m, :]), (d, k)."""
    n, m = spectrum.n, spectrum.m
    if not 0 <= i < n:
        raise IndexError(f"node {i} out of range [0, {n})")
    rows = spectrum.eigenvectors[i * m:(i + 1) * m] * np.sqrt(n * m)
    return frames.frames[i] @ rows


def dirichlet_energy(graph: ProximityGraph, transports: TransportMaps,
                     coords: np.ndarray) -> float:
    """Sum over undirected edges of w_ij |v_i - O_ij v_j|^2.

    ``coords`` holds per-node tangent coordinates, shape (n, m). Equals the
    quadratic form of the connection Laplacian on the stacked field.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] != graph.n:
        raise ValueError("field has wrong number of nodes")
    total = 0.0
    for (i, j), w in zip(graph.edges, graph.weights):
        i, j = int(i), int(j)
        diff = coords[i] - transports.into(i, j) @ coords[j]
        total += w * float(diff @ diff)
    return total
