"""Spectral Matern Gaussian processes on the discrete tangent bundle.

The kernel between nodes is k(p, q) = sigma^2 * c_norm * P_p diag(f) P_q^T,
where P are positional encodings built from connection-Laplacian
eigenvectors and f are Matern filter values Phi(lambda)^-2. The filter
normalization c_norm is chosen so the mean diagonal trace of the prior Gram
over all nodes equals sigma^2 * m, making sigma the marginal standard
deviation per tangent dimension.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.spatial import cKDTree

from .geometry import GaugeFrames, PointCloud, ProximityGraph
from .spectral import Spectrum, positional_encodings

__all__ = [
    "MaternHyperparams",
    "VectorFieldGP",
    "SearchConfig",
    "GramConditioningError",
    "spectral_filter",
    "normalization_constant",
    "kernel_block",
    "assemble_gram",
    "fit",
    "predict",
    "predict_at_encodings",
    "log_marginal_likelihood",
    "fit_hyperparameters",
    "coordinate_search",
    "inducing_point_predict",
    "extend_encodings",
]

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


class GramConditioningError(RuntimeError):
    """Cholesky failed even at the maximum jitter level."""


@dataclass(frozen=True)
class MaternHyperparams:
    """Amplitude sigma, lengthscale kappa, smoothness nu (inf allowed), noise sigma_n."""

    sigma: float = 1.0
    kappa: float = 1.0
    nu: float = 1.5
    sigma_n: float = 1e-3

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError(f"kappa must be positive and finite, got {self.kappa}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive (inf allowed), got {self.nu}")
        if not (self.sigma_n >= 0 and math.isfinite(self.sigma_n)):
            raise ValueError(f"sigma_n must be nonnegative and finite, got {self.sigma_n}")


def spectral_filter(eigenvalues: np.ndarray, hyperparams: MaternHyperparams) -> np.ndarray:
    """Diagonal filter values Phi(lambda)^-2 for the Matern spectral kernel.

    Finite nu: (2 nu / kappa^2 + lambda)^-nu. nu = inf uses the heat form
    exp(-kappa^2 lambda / 2). Eigenvalues within -1e-8 of zero are clamped.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.min(initial=0.0) < -1e-8:
        raise ValueError(f"negative eigenvalue {lam.min():.3e} beyond tolerance")
    lam = np.clip(lam, 0.0, None)
    if math.isinf(hyperparams.nu):
        return np.exp(-hyperparams.kappa**2 * lam / 2.0)
    return (2.0 * hyperparams.nu / hyperparams.kappa**2 + lam) ** (-hyperparams.nu)


def normalization_constant(encodings: np.ndarray, filter_values: np.ndarray,
                           m: int) -> float:
    """c_norm such that the mean prior variance trace per node is sigma^2 * m."""
    traces = np.einsum("idk,idk,k->i", encodings, encodings, filter_values)
    mean_trace = float(traces.mean())
    if not mean_trace > 0:
        raise ValueError("encodings give nonpositive mean prior trace")
    return m / mean_trace


def kernel_block(p: np.ndarray, q: np.ndarray, filter_values: np.ndarray,
                 sigma: float, c_norm: float) -> np.ndarray:
    """d x d kernel block sigma^2 * c_norm * P diag(f) Q^T between two encodings."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[1] != q.shape[1] or p.shape[1] != filter_values.shape[0]:
        raise ValueError(
            f"encoding/filter width mismatch: {p.shape[1]}, {q.shape[1]}, "
            f"{filter_values.shape[0]}"
        )
    return sigma**2 * c_norm * (p * filter_values) @ q.T


def _features(encodings: np.ndarray, filter_values: np.ndarray, sigma: float,
              c_norm: float) -> np.ndarray:
    """Feature matrix A with K = A A^T, shape (n*d, k)."""
    n, d, k = encodings.shape
    flat = encodings.reshape(n * d, k)
    return (sigma * np.sqrt(c_norm)) * flat * np.sqrt(filter_values)


def _cholesky_with_jitter(mat: np.ndarray) -> tuple[np.ndarray, float]:
    scale = max(float(np.mean(np.diag(mat))), np.finfo(float).tiny)
    for level in JITTER_LADDER:
        try:
            chol = np.linalg.cholesky(mat + (level * scale) * np.eye(mat.shape[0]))
            return chol, level * scale
        except np.linalg.LinAlgError:
            continue
    evals = np.linalg.eigvalsh(mat)
    raise GramConditioningError(
        f"Cholesky failed at jitter {JITTER_LADDER[-1]:.0e} * {scale:.3e}; "
        f"eigenvalue range [{evals.min():.3e}, {evals.max():.3e}]"
    )


def assemble_gram(encodings: np.ndarray, filter_values: np.ndarray, sigma: float,
                  sigma_n: float, c_norm: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Noisy Gram matrix over the given encodings plus its Cholesky factor.

    Returns (K + sigma_n^2 I + jitter I, lower Cholesky factor, jitter used).
    The jitter ladder climbs multiplicatively to 1e-4 (relative to the mean
    diagonal); failure beyond that raises :class:`GramConditioningError`.
    """
    if encodings.shape[0] < 1:
        raise ValueError("need at least one training node")
    feats = _features(encodings, filter_values, sigma, c_norm)
    gram = feats @ feats.T
    gram = (gram + gram.T) / 2.0
    gram += sigma_n**2 * np.eye(gram.shape[0])
    chol, jitter = _cholesky_with_jitter(gram)
    if jitter:
        gram += jitter * np.eye(gram.shape[0])
    return gram, chol, jitter


@dataclass
class VectorFieldGP:
    """Fitted vector-field GP: spectrum slice, encodings, hyperparameters,
    training targets and the Cholesky factor of the noisy Gram matrix."""

    spectrum: Spectrum
    encodings: np.ndarray  # (n, d, k), all nodes
    hyperparams: MaternHyperparams
    train_nodes: np.ndarray
    targets: np.ndarray  # (n_train, d) ambient vectors
    filter_values: np.ndarray
    c_norm: float
    chol: np.ndarray
    alpha: np.ndarray  # (K + sigma_n^2 I)^{-1} y, flattened
    jitter: float

    @property
    def dim(self) -> int:
        return self.encodings.shape[1]


def _fit_prepared(encodings: np.ndarray, train_nodes: np.ndarray, targets: np.ndarray,
                  spectrum: Spectrum, hyperparams: MaternHyperparams) -> VectorFieldGP:
    filter_values = spectral_filter(spectrum.eigenvalues, hyperparams)
    c_norm = normalization_constant(encodings, filter_values, spectrum.m)
    _, chol, jitter = assemble_gram(
        encodings[train_nodes], filter_values, hyperparams.sigma,
        hyperparams.sigma_n, c_norm,
    )
    alpha = cho_solve((chol, True), targets.reshape(-1))
    return VectorFieldGP(
        spectrum=spectrum,
        encodings=encodings,
        hyperparams=hyperparams,
        train_nodes=train_nodes,
        targets=targets,
        filter_values=filter_values,
        c_norm=c_norm,
        chol=chol,
        alpha=alpha,
        jitter=jitter,
    )


def fit(train_nodes: np.ndarray, targets: np.ndarray, spectrum: Spectrum,
        frames: GaugeFrames, hyperparams: MaternHyperparams) -> VectorFieldGP:
    """Condition the GP on ambient training vectors at the given nodes."""
    train_nodes = np.asarray(train_nodes, dtype=np.int64).reshape(-1)
    if np.unique(train_nodes).shape[0] != train_nodes.shape[0]:
        raise ValueError("training nodes must be distinct")
    if train_nodes.min(initial=0) < 0 or train_nodes.max(initial=0) >= spectrum.n:
        raise IndexError("training node out of range")
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (train_nodes.shape[0], frames.dim):
        raise ValueError(
            f"targets must have shape {(train_nodes.shape[0], frames.dim)}, "
            f"got {targets.shape}"
        )
    if not np.isfinite(targets).all():
        raise ValueError("targets contain NaN or Inf")
    encodings = positional_encodings(spectrum, frames)
    return _fit_prepared(encodings, train_nodes, targets, spectrum, hyperparams)


def predict_at_encodings(model: VectorFieldGP, query_encodings: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean vectors and per-node d x d covariance blocks."""
    q, d, _ = query_encodings.shape
    feats_train = _features(model.encodings[model.train_nodes], model.filter_values,
                            model.hyperparams.sigma, model.c_norm)
    feats_query = _features(query_encodings, model.filter_values,
                            model.hyperparams.sigma, model.c_norm)
    k_star = feats_query @ feats_train.T  # (q*d, N)
    mean = (k_star @ model.alpha).reshape(q, d)
    solved = cho_solve((model.chol, True), k_star.T)  # (N, q*d)
    covs = np.empty((q, d, d))
    for a in range(q):
        rows = slice(a * d, (a + 1) * d)
        prior = feats_query[rows] @ feats_query[rows].T
        cov = prior - k_star[rows] @ solved[:, rows]
        covs[a] = (cov + cov.T) / 2.0
    return mean, covs


def predict(model: VectorFieldGP, query_nodes: np.ndarray
            ) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance blocks at graph nodes."""
    query_nodes = np.asarray(query_nodes, dtype=np.int64).reshape(-1)
    if query_nodes.size and (query_nodes.min() < 0
                             or query_nodes.max() >= model.encodings.shape[0]):
        raise IndexError("query node out of range")
    return predict_at_encodings(model, model.encodings[query_nodes])


def log_marginal_likelihood(model: VectorFieldGP) -> float:
    """-1/2 y^T K^-1 y - 1/2 log det K - (N/2) log 2 pi with K the noisy Gram."""
    y = model.targets.reshape(-1)
    n_obs = y.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(model.chol))))
    return float(-0.5 * y @ model.alpha - 0.5 * logdet - 0.5 * n_obs * math.log(2 * math.pi))


@dataclass(frozen=True)
class SearchConfig:
    """Box bounds (natural log) and budget for hyperparameter search."""

    log_sigma_bounds: tuple[float, float] = (math.log(1e-3), math.log(1e3))
    log_kappa_bounds: tuple[float, float] = (math.log(1e-2), math.log(1e3))
    log_sigma_n_bounds: tuple[float, float] = (math.log(1e-6), math.log(10.0))
    n_starts: int = 3
    n_sweeps: int = 5
    grid_points: int = 7

    @property
    def bounds(self) -> tuple[tuple[float, float], ...]:
        return (self.log_sigma_bounds, self.log_kappa_bounds, self.log_sigma_n_bounds)


def coordinate_search(objective, search: SearchConfig, seed: int,
                      start: np.ndarray | None = None) -> np.ndarray:
    """Deterministic multi-start coordinate descent over the search box.

    Maximizes ``objective(theta)`` (theta in log space, -inf allowed) on a
    shrinking per-axis grid. Returns the best theta over every evaluation,
    so the result dominates all grid initializations by construction.
    """
    lows = np.array([b[0] for b in search.bounds])
    highs = np.array([b[1] for b in search.bounds])
    rng = np.random.default_rng(seed)
    mid = (lows + highs) / 2.0
    starts = [np.clip(mid if start is None else np.asarray(start, float), lows, highs)]
    for _ in range(search.n_starts - 1):
        starts.append(lows + (highs - lows) * rng.uniform(size=lows.shape[0]))

    best_theta = None
    best_value = -np.inf
    any_finite = False
    for theta0 in starts:
        theta = theta0.copy()
        value = objective(theta)
        if np.isfinite(value):
            any_finite = True
        if value > best_value:
            best_value, best_theta = value, theta.copy()
        span = (highs - lows) / 4.0
        for _ in range(search.n_sweeps):
            improved = False
            for axis in range(lows.shape[0]):
                grid = theta[axis] + np.linspace(-span[axis], span[axis],
                                                 search.grid_points)
                grid = np.clip(grid, lows[axis], highs[axis])
                for cand in np.unique(grid):
                    trial = theta.copy()
                    trial[axis] = cand
                    v = objective(trial)
                    if np.isfinite(v):
                        any_finite = True
                    if v > value:
                        value, theta = v, trial
                        improved = True
                    if v > best_value:
                        best_value, best_theta = v, trial.copy()
            span *= 0.5
            if not improved and span.max() < 1e-3:
                break
    if not any_finite or best_theta is None:
        raise ValueError("objective was NaN/inf everywhere searched")
    return best_theta


def fit_hyperparameters(train_nodes: np.ndarray, targets: np.ndarray,
                        spectrum: Spectrum, frames: GaugeFrames,
                        nu: float = 1.5, search: SearchConfig | None = None,
                        seed: int = 0,
                        initial: MaternHyperparams | None = None,
                        ) -> MaternHyperparams:
    """Maximize the log marginal likelihood over (sigma, kappa, sigma_n).

    Coordinate descent in log space with nu held fixed; deterministic for a
    fixed seed. ``initial`` seeds the first start (defaults to the box
    centre).
    """
    if search is None:
        search = SearchConfig()
    train_nodes = np.asarray(train_nodes, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=float)
    encodings = positional_encodings(spectrum, frames)

    def objective(theta: np.ndarray) -> float:
        try:
            hp = MaternHyperparams(sigma=math.exp(theta[0]), kappa=math.exp(theta[1]),
                                   nu=nu, sigma_n=math.exp(theta[2]))
            model = _fit_prepared(encodings, train_nodes, targets, spectrum, hp)
            value = log_marginal_likelihood(model)
        except (GramConditioningError, np.linalg.LinAlgError, ValueError,
                FloatingPointError, OverflowError):
            return -np.inf
        return value if np.isfinite(value) else -np.inf

    start = None
    if initial is not None:
        start = np.array([math.log(initial.sigma), math.log(initial.kappa),
                          math.log(max(initial.sigma_n, 1e-12))])
    try:
        best = coordinate_search(objective, search, seed, start)
    except ValueError as exc:
        raise ValueError(f"hyperparameter search failed: {exc}") from None
    return MaternHyperparams(sigma=math.exp(best[0]), kappa=math.exp(best[1]),
                             nu=nu, sigma_n=math.exp(best[2]))


def inducing_point_predict(train_nodes: np.ndarray, targets: np.ndarray,
                           inducing_nodes: np.ndarray, spectrum: Spectrum,
                           frames: GaugeFrames, hyperparams: MaternHyperparams,
                           query_nodes: np.ndarray
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic-training-conditional (DTC) posterior through an inducing set.

    mean = K_*u (K_uu + sigma_n^-2 K_uf K_fu)^-1 sigma_n^-2 K_uf y with the
    Nystrom covariance. Exact (up to jitter) when the inducing set equals
    the training set. Inducing covariances live in tangent coordinates via
    the shared encodings.
    """
    if hyperparams.sigma_n <= 0:
        raise ValueError("DTC requires sigma_n > 0")
    train_nodes = np.asarray(train_nodes, dtype=np.int64).reshape(-1)
    inducing_nodes = np.asarray(inducing_nodes, dtype=np.int64).reshape(-1)
    query_nodes = np.asarray(query_nodes, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=float)
    encodings = positional_encodings(spectrum, frames)
    filt = spectral_filter(spectrum.eigenvalues, hyperparams)
    c_norm = normalization_constant(encodings, filt, spectrum.m)

    a_u = _features(encodings[inducing_nodes], filt, hyperparams.sigma, c_norm)
    a_f = _features(encodings[train_nodes], filt, hyperparams.sigma, c_norm)
    a_q = _features(encodings[query_nodes], filt, hyperparams.sigma, c_norm)

    k_uu = a_u @ a_u.T
    k_uu = (k_uu + k_uu.T) / 2.0
    try:
        chol_u, _ = _cholesky_with_jitter(k_uu)
    except GramConditioningError as exc:
        raise GramConditioningError(
            f"inducing covariance is singular even after jitter: {exc}"
        ) from exc

    c_f = solve_triangular(chol_u, a_u @ a_f.T, lower=True)  # (Du, Df)
    c_q = solve_triangular(chol_u, a_u @ a_q.T, lower=True)  # (Du, Dq)
    mid = hyperparams.sigma_n**2 * np.eye(c_f.shape[0]) + c_f @ c_f.T
    chol_mid = np.linalg.cholesky((mid + mid.T) / 2.0)
    mean_flat = c_q.T @ cho_solve((chol_mid, True), c_f @ targets.reshape(-1))

    d = frames.dim
    q = query_nodes.shape[0]
    solved_q = cho_solve((chol_mid, True), c_q)
    covs = np.empty((q, d, d))
    for a in range(q):
        rows = slice(a * d, (a + 1) * d)
        prior = a_q[rows] @ a_q[rows].T
        nystrom = c_q[:, rows].T @ c_q[:, rows]
        correction = hyperparams.sigma_n**2 * (c_q[:, rows].T @ solved_q[:, rows])
        cov = prior - nystrom + correction
        covs[a] = (cov + cov.T) / 2.0
    return mean_flat.reshape(q, d), covs


def extend_encodings(new_points: np.ndarray, cloud: PointCloud,
                     graph: ProximityGraph, frames: GaugeFrames,
                     spectrum: Spectrum, n_neighbors: int | None = None
                     ) -> tuple[np.ndarray, GaugeFrames]:
    """Out-of-graph extension: encode ambient points that are not graph nodes.

    This is an extension beyond the core method, which is defined on graph
    nodes only. Each new point gets a frame from the SVD of edge vectors to
    its nearest graph nodes, and an encoding equal to the transported,
    inverse-square-distance-weighted average of those nodes' tangent
    eigencoordinates mapped into the new frame. A query at a node position
    reproduces that node's encoding. Useful for rough off-node queries;
    accuracy is untested theory.
    """
    new_points = np.atleast_2d(np.asarray(new_points, dtype=float))
    if new_points.shape[1] != cloud.dim:
        raise ValueError("new points have wrong ambient dimension")
    m, k = spectrum.m, spectrum.k
    if n_neighbors is None:
        # mirror the frame-estimation neighbourhood rule
        n_neighbors = max(m + 1, 2 * int(round(float(np.mean(graph.degrees)))))
    n_neighbors = min(n_neighbors, cloud.n)
    tree = cKDTree(cloud.points)
    dists, nbr_idx = tree.query(new_points, k=n_neighbors)
    nbr_idx = np.atleast_2d(nbr_idx)
    dists = np.atleast_2d(dists)
    scaled = (spectrum.eigenvectors * np.sqrt(spectrum.n * m)).reshape(spectrum.n, m, k)

    out = np.empty((new_points.shape[0], cloud.dim, k))
    new_frames = np.empty((new_points.shape[0], cloud.dim, m))
    for a, x in enumerate(new_points):
        nbrs = nbr_idx[a]
        edge_vecs = (cloud.points[nbrs] - x).T
        u, s, _ = np.linalg.svd(edge_vecs, full_matrices=False)
        if s.shape[0] < m or s[m - 1] <= s[0] * max(edge_vecs.shape) * np.finfo(float).eps:
            raise ValueError(f"query point {a}: neighbourhood rank < {m}")
        t_new = _fix_signs_frame(u[:, :m])
        floor = (1e-8 * max(float(dists[a].mean()), np.finfo(float).tiny)) ** 2
        weights = 1.0 / (dists[a] ** 2 + floor)
        weights /= weights.sum()
        acc = np.zeros((m, k))
        for w, j in zip(weights, nbrs):
            # align the neighbour frame onto the new frame: j-coords -> new coords
            mat = t_new.T @ frames.frames[j]
            uu, ss, vv = np.linalg.svd(mat)
            if ss[-1] < 1e-10:
                raise ValueError(
                    f"query point {a}: tangent space nearly orthogonal to node {j}"
                )
            acc += w * ((uu @ vv) @ scaled[j])
        out[a] = t_new @ acc
        new_frames[a] = t_new
    return out, GaugeFrames(new_frames)


def _fix_signs_frame(mat: np.ndarray) -> np.ndarray:
    out = mat.copy()
    for c in range(out.shape[1]):
        r = int(np.argmax(np.abs(out[:, c])))
        if out[r, c] < 0:
            out[:, c] = -out[:, c]
    return out
