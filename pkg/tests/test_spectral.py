import numpy as np
import pytest
from scipy.stats import ortho_group

import tangentgp as tg
from tangentgp import spectral
from tangentgp.spectral import EigensolverError, scalar_frames, truncate

from conftest import build_setup


def random_connected_graph(rng, n):
    """Random geometric graph, regenerated until connected."""
    while True:
        pts = rng.standard_normal((n, 3))
        cloud = tg.PointCloud(pts)
        try:
            graph = tg.build_knn_graph(cloud, min(4, n - 1))
        except tg.geometry.DisconnectedGraphError:
            continue
        return cloud, graph


class TestGraphLaplacian:
    def test_single_edge_dense_form(self):
        graph = tg.ProximityGraph(n=2, edges=[[0, 1]], weights=[1.0])
        lap = tg.assemble_graph_laplacian(graph)
        assert np.array_equal(lap.matrix.toarray(), [[1.0, -1.0], [-1.0, 1.0]])

    def test_triangle_cycle_eigenvalues(self):
        graph = tg.ProximityGraph(n=3, edges=[[0, 1], [0, 2], [1, 2]],
                                  weights=[1.0, 1.0, 1.0])
        lap = tg.assemble_graph_laplacian(graph)
        # oracle: dense eigensolver
        vals = np.linalg.eigvalsh(lap.matrix.toarray())
        assert np.allclose(vals, [0.0, 3.0, 3.0], atol=1e-12)

    def test_row_sums_zero(self, torus):
        lap = tg.assemble_graph_laplacian(torus.graph)
        sums = np.asarray(lap.matrix.sum(axis=1)).ravel()
        assert np.abs(sums).max() <= 1e-12


class TestConnectionLaplacian:
    def test_trivial_line_bundle_on_one_edge(self):
        graph = tg.ProximityGraph(n=2, edges=[[0, 1]], weights=[1.0])
        frames = scalar_frames(2)
        transports = tg.compute_transports(graph, frames)
        con = tg.assemble_connection_laplacian(graph, frames, transports)
        dense = con.matrix.toarray()
        assert np.array_equal(dense, [[1.0, -1.0], [-1.0, 1.0]])
        assert np.allclose(np.linalg.eigvalsh(dense), [0.0, 2.0], atol=1e-12)

    def test_m1_equals_graph_laplacian_exactly(self):
        # trivial-bundle reduction is exact, not approximate
        rng = np.random.default_rng(0)
        for _ in range(5):
            cloud, graph = random_connected_graph(rng, 20)
            frames = scalar_frames(graph.n)
            transports = tg.compute_transports(graph, frames)
            con = tg.assemble_connection_laplacian(graph, frames, transports)
            lap = tg.assemble_graph_laplacian(graph)
            diff = (con.matrix - lap.matrix).toarray()
            assert np.abs(diff).max() == 0.0

    def test_c4_identity_transports_kron_oracle(self):
        graph = tg.ProximityGraph(n=4, edges=[[0, 1], [1, 2], [2, 3], [0, 3]],
                                  weights=np.ones(4))
        base = np.eye(3)[:, :2]
        frames = tg.GaugeFrames(np.stack([base] * 4))
        transports = tg.compute_transports(graph, frames)
        con = tg.assemble_connection_laplacian(graph, frames, transports)
        lap = tg.assemble_graph_laplacian(graph).matrix.toarray()
        # oracle: the Kronecker structure of a trivial rank-2 bundle
        assert np.array_equal(con.matrix.toarray(), np.kron(lap, np.eye(2)))
        vals = np.linalg.eigvalsh(con.matrix.toarray())
        assert np.allclose(vals, np.sort(np.repeat([0.0, 2.0, 2.0, 4.0], 2)),
                           atol=1e-12)

    def test_missing_transport_rejected(self, torus):
        partial = tg.TransportMaps({k: v for k, v in
                                    list(torus.transports.maps.items())[:-1]})
        with pytest.raises(ValueError, match="missing transport"):
            tg.assemble_connection_laplacian(torus.graph, torus.frames, partial)

    def test_symmetric_and_psd(self, torus):
        dense = torus.con.matrix.toarray()
        assert np.abs(dense - dense.T).max() <= 1e-12
        vals = np.linalg.eigvalsh(dense)
        assert vals.min() >= -1e-8 * vals.max()


class TestEigendecompose:
    def test_full_spectrum_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        cloud, graph = random_connected_graph(rng, 10)
        frames = tg.estimate_tangent_frames(graph, cloud, 2)
        transports = tg.compute_transports(graph, frames)
        con = tg.assemble_connection_laplacian(graph, frames, transports)
        spec = tg.eigendecompose(con, con.size)
        oracle = np.linalg.eigvalsh(con.matrix.toarray())
        assert np.abs(spec.eigenvalues - np.clip(oracle, 0, None)).max() <= 1e-8

    def test_lanczos_matches_dense(self, torus):
        k = 12
        dense = tg.eigendecompose(torus.con, k, method="dense")
        lanczos = tg.eigendecompose(torus.con, k, method="lanczos", seed=0)
        assert np.abs(dense.eigenvalues - lanczos.eigenvalues).max() <= 1e-8
        # subspace agreement per eigenvalue cluster (degeneracy-safe)
        clusters = _eigenvalue_clusters(dense.eigenvalues, tol=1e-6)
        for cluster in clusters:
            if cluster[-1] == k - 1 and dense.splits_degenerate_cluster(1e-6):
                continue
            from scipy.linalg import subspace_angles
            angles = subspace_angles(dense.eigenvectors[:, cluster],
                                     lanczos.eigenvectors[:, cluster])
            assert angles.max() < 1e-6

    def test_null_space_constant_vector(self, torus):
        spec = tg.eigendecompose(torus.lap, 3)
        assert spec.eigenvalues[0] <= 1e-9
        u0 = spec.eigenvectors[:, 0]
        assert np.abs(u0 - u0.mean()).max() <= 1e-8

    def test_deterministic_given_seed(self, torus):
        a = tg.eigendecompose(torus.con, 8, method="lanczos", seed=3)
        b = tg.eigendecompose(torus.con, 8, method="lanczos", seed=3)
        assert np.array_equal(a.eigenvalues, b.eigenvalues)
        assert np.array_equal(a.eigenvectors, b.eigenvectors)

    def test_residual_invariant(self, torus, torus_spectrum):
        mat = torus.con.matrix
        fro = np.sqrt((mat.data ** 2).sum())
        resid = np.linalg.norm(
            mat @ torus_spectrum.eigenvectors
            - torus_spectrum.eigenvectors * torus_spectrum.eigenvalues, axis=0)
        assert resid.max() <= 1e-8 * fro

    def test_orthonormal_eigenvectors(self, torus_spectrum):
        u = torus_spectrum.eigenvectors
        assert np.linalg.norm(u.T @ u - np.eye(u.shape[1])) <= 1e-8

    def test_k_out_of_range(self, torus):
        with pytest.raises(ValueError):
            tg.eigendecompose(torus.con, 0)
        with pytest.raises(ValueError):
            tg.eigendecompose(torus.con, torus.con.size + 1)

    def test_truncate(self, torus_spectrum):
        small = truncate(torus_spectrum, 10)
        assert small.k == 10
        assert np.array_equal(small.eigenvalues, torus_spectrum.eigenvalues[:10])
        assert small.next_eigenvalue == pytest.approx(
            float(torus_spectrum.eigenvalues[10]))


def _eigenvalue_clusters(values, tol):
    clusters = [[0]]
    for idx in range(1, len(values)):
        if values[idx] - values[idx - 1] < tol:
            clusters[-1].append(idx)
        else:
            clusters.append([idx])
    return clusters


class TestPositionalEncoding:
    def test_scalar_case_is_laplacian_eigenmap(self, torus):
        spec = tg.eigendecompose(torus.lap, 6)
        frames = scalar_frames(torus.cloud.n)
        enc = tg.positional_encodings(spec, frames)
        expected = np.sqrt(torus.cloud.n) * spec.eigenvectors
        assert np.allclose(enc[:, 0, :], expected, atol=1e-12)

    def test_constant_eigenvector_gives_ones(self):
        graph = tg.ProximityGraph(n=5, edges=[[0, 1], [1, 2], [2, 3], [3, 4]],
                                  weights=np.ones(4))
        lap = tg.assemble_graph_laplacian(graph)
        spec = tg.eigendecompose(lap, 1)
        enc = tg.positional_encodings(spec, scalar_frames(5))
        assert np.allclose(enc[:, 0, 0], 1.0, atol=1e-9)

    def test_columns_lie_in_tangent_span(self, torus, torus_spectrum):
        enc = tg.positional_encodings(torus_spectrum, torus.frames)
        for i in (0, 57, 399):
            frame = torus.frames.frames[i]
            resid = enc[i] - frame @ (frame.T @ enc[i])
            assert np.abs(resid).max() <= 1e-10

    def test_single_node_matches_batch(self, torus, torus_spectrum):
        enc = tg.positional_encodings(torus_spectrum, torus.frames)
        single = tg.positional_encoding(torus_spectrum, torus.frames, 123)
        assert np.allclose(single, enc[123], atol=1e-12)

    def test_index_out_of_range(self, torus, torus_spectrum):
        with pytest.raises(IndexError):
            tg.positional_encoding(torus_spectrum, torus.frames, 400)


class TestDirichletEnergy:
    def test_zero_field(self, torus):
        assert tg.dirichlet_energy(torus.graph, torus.transports,
                                   np.zeros((400, 2))) == 0.0

    def test_parallel_field_flat_frames(self):
        graph = tg.ProximityGraph(n=4, edges=[[0, 1], [1, 2], [2, 3], [0, 3]],
                                  weights=np.ones(4))
        frames = tg.GaugeFrames(np.stack([np.eye(3)[:, :2]] * 4))
        transports = tg.compute_transports(graph, frames)
        coords = np.tile([0.4, -0.7], (4, 1))
        assert tg.dirichlet_energy(graph, transports, coords) <= 1e-15

    def test_quadratic_form_identity(self):
        # oracle: dense evaluation of the quadratic form pins the sign convention
        rng = np.random.default_rng(2)
        cloud, graph = random_connected_graph(rng, 5)
        frames = tg.estimate_tangent_frames(graph, cloud, 2)
        transports = tg.compute_transports(graph, frames)
        con = tg.assemble_connection_laplacian(graph, frames, transports)
        dense = con.matrix.toarray()
        for _ in range(20):
            coords = rng.standard_normal((5, 2))
            energy = tg.dirichlet_energy(graph, transports, coords)
            quad = coords.reshape(-1) @ dense @ coords.reshape(-1)
            assert energy == pytest.approx(quad, rel=1e-10)

    def test_quadratic_form_identity_on_torus(self, torus):
        rng = np.random.default_rng(3)
        dense = torus.con.matrix
        coords = rng.standard_normal((torus.cloud.n, 2))
        energy = tg.dirichlet_energy(torus.graph, torus.transports, coords)
        quad = coords.reshape(-1) @ (dense @ coords.reshape(-1))
        assert energy == pytest.approx(quad, rel=1e-10)


class TestGaugeCovariance:
    def test_encoding_projector_invariant_under_gauge_change(self):
        rng = np.random.default_rng(7)
        cloud, graph = random_connected_graph(rng, 25)
        frames = tg.estimate_tangent_frames(graph, cloud, 2)

        def encodings_for(fr, k):
            transports = tg.compute_transports(graph, fr)
            con = tg.assemble_connection_laplacian(graph, fr, transports)
            spec = tg.eigendecompose(con, k)
            assert not spec.splits_degenerate_cluster(1e-6), "pick a different k"
            return tg.positional_encodings(spec, fr)

        k = 7
        enc_a = encodings_for(frames, k)
        rotations = ortho_group.rvs(2, size=25, random_state=rng)
        rotated = tg.GaugeFrames(np.einsum("ndm,nmk->ndk", frames.frames, rotations))
        enc_b = encodings_for(rotated, k)
        for i in range(25):
            proj_a = enc_a[i] @ np.linalg.pinv(enc_a[i])
            proj_b = enc_b[i] @ np.linalg.pinv(enc_b[i])
            assert np.abs(proj_a - proj_b).max() <= 1e-8
