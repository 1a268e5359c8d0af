"""Auto-dispatch of the iterative solver paths for operators above the dense
cutoff (eigensolver -> Lanczos, heat flow -> implicit Euler)."""
import numpy as np

import tangentgp as tg
from tangentgp import fields as tf
from tangentgp import io as tio
from tangentgp.spectral import DENSE_FALLBACK_SIZE

from conftest import build_setup


def big_setup():
    points, faces = tio.generate_torus(2.0, 0.8, 40, 40)
    cloud = tg.PointCloud(points)
    graph = tg.build_mesh_graph(cloud, faces)
    frames = tg.estimate_tangent_frames(graph, cloud, 2)
    transports = tg.compute_transports(graph, frames)
    con = tg.assemble_connection_laplacian(graph, frames, transports)
    lap = tg.assemble_graph_laplacian(graph)
    return cloud, graph, frames, con, lap


def test_large_operator_uses_lanczos_and_implicit_heat():
    cloud, graph, frames, con, lap = big_setup()
    assert con.size > DENSE_FALLBACK_SIZE

    spec = tg.eigendecompose(con, 12, seed=0)  # auto -> lanczos
    assert spec.k == 12
    assert spec.eigenvalues[0] >= 0.0
    assert np.all(np.diff(spec.eigenvalues) >= 0)
    rerun = tg.eigendecompose(con, 12, seed=0)
    assert np.array_equal(spec.eigenvalues, rerun.eigenvalues)
    assert np.array_equal(spec.eigenvectors, rerun.eigenvectors)

    rng = np.random.default_rng(0)
    u0 = rng.standard_normal(cloud.n)
    u = tf.scalar_heat(lap, u0, 2.0)  # auto -> implicit Euler
    # implicit steps conserve mass exactly and contract the seminorm
    assert abs(u.sum() - u0.sum()) <= 1e-6 * max(1.0, abs(u0.sum()))
    dense = lap.matrix
    assert u @ (dense @ u) <= u0 @ (dense @ u0)

    gen = tf.generate_experiment_field(cloud, frames, con, lap,
                                       anchor_count=120, seed=7)
    assert np.isfinite(gen.field.coords).all()
    assert gen.direction_norms.max() > 0


def test_anisotropic_knn_rejected_with_named_nodes():
    # 40x40 parametric torus: outer-equator k-NN neighbourhoods collapse to
    # minor-circle arcs, which must surface as a transport rank error rather
    # than silently bad frames
    points, _ = tio.generate_torus(2.0, 0.8, 40, 40)
    cloud = tg.PointCloud(points)
    graph = tg.build_knn_graph(cloud, 6)
    frames = tg.estimate_tangent_frames(graph, cloud, 2)
    try:
        tg.compute_transports(graph, frames)
    except tg.geometry.TransportRankError as exc:
        assert "coarse" in str(exc)
    else:
        raise AssertionError("expected TransportRankError on degenerate frames")
