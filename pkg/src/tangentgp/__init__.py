"""Gaussian-process regression of vector fields over latent manifolds.

A proximity graph approximates the manifold, per-node orthonormal frames
approximate the tangent bundle, and the connection Laplacian built from
Procrustes transport maps supplies positional encodings for a spectral
Matern kernel. Modules: geometry (graphs, frames, transports), spectral
(Laplacians and spectra), gp (kernels and posteriors), fields (heat flows,
ground truth, metrics), io (file formats), cli (batch commands).
"""

__version__ = "0.1.0"

from .geometry import (
    GaugeFrames,
    PointCloud,
    ProximityGraph,
    TransportMaps,
    build_knn_graph,
    build_mesh_graph,
    compute_transport,
    compute_transports,
    estimate_intrinsic_dim,
    estimate_tangent_frames,
    furthest_point_sample,
    mean_edge_length,
    project_to_tangent,
    tangent_to_ambient,
)
from .spectral import (
    ConnectionLaplacian,
    GraphLaplacian,
    Spectrum,
    assemble_connection_laplacian,
    assemble_graph_laplacian,
    dirichlet_energy,
    eigendecompose,
    positional_encoding,
    positional_encodings,
    scalar_frames,
)
from .gp import (
    MaternHyperparams,
    SearchConfig,
    VectorFieldGP,
    assemble_gram,
    extend_encodings,
    fit,
    fit_hyperparameters,
    inducing_point_predict,
    kernel_block,
    log_marginal_likelihood,
    normalization_constant,
    predict,
    predict_at_encodings,
    spectral_filter,
)
from .fields import (
    GeneratedField,
    MetricResult,
    TangentField,
    VectorHeatResult,
    alignment_score,
    angular_error,
    baseline_scalar_rbf_predict,
    boundary_angular_jump,
    generate_experiment_field,
    out_of_tangent_magnitude,
    scalar_heat,
    vector_diffusion,
    vector_heat,
)

__all__ = [
    "__version__",
    "PointCloud", "ProximityGraph", "GaugeFrames", "TransportMaps",
    "build_knn_graph", "build_mesh_graph", "furthest_point_sample",
    "estimate_tangent_frames", "estimate_intrinsic_dim", "project_to_tangent",
    "tangent_to_ambient", "compute_transport", "compute_transports",
    "mean_edge_length",
    "GraphLaplacian", "ConnectionLaplacian", "Spectrum",
    "assemble_graph_laplacian", "assemble_connection_laplacian",
    "eigendecompose", "positional_encoding", "positional_encodings",
    "scalar_frames", "dirichlet_energy",
    "MaternHyperparams", "SearchConfig", "VectorFieldGP", "spectral_filter",
    "normalization_constant", "kernel_block", "assemble_gram", "fit", "predict",
    "log_marginal_likelihood", "fit_hyperparameters", "inducing_point_predict",
    "extend_encodings", "predict_at_encodings",
    "TangentField", "VectorHeatResult", "GeneratedField", "MetricResult",
    "scalar_heat", "vector_diffusion", "vector_heat",
    "generate_experiment_field", "baseline_scalar_rbf_predict",
    "alignment_score", "angular_error", "out_of_tangent_magnitude",
    "boundary_angular_jump",
]
