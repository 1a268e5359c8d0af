from dataclasses import dataclass

import numpy as np
import pytest

import tangentgp as tg
from tangentgp import fields as tfields
from tangentgp import io as tio
from tangentgp import spectral


@dataclass
class ManifoldSetup:
    cloud: tg.PointCloud
    faces: np.ndarray
    graph: tg.ProximityGraph
    frames: tg.GaugeFrames
    transports: tg.TransportMaps
    lap: spectral.GraphLaplacian
    con: spectral.ConnectionLaplacian


def build_setup(points, faces, k_neighbors=6, m=2):
    cloud = tg.PointCloud(points)
    graph = tg.build_knn_graph(cloud, k_neighbors)
    frames = tg.estimate_tangent_frames(graph, cloud, m)
    transports = tg.compute_transports(graph, frames)
    lap = tg.assemble_graph_laplacian(graph)
    con = tg.assemble_connection_laplacian(graph, frames, transports)
    return ManifoldSetup(cloud, faces, graph, frames, transports, lap, con)


@pytest.fixture(scope="session")
def torus():
    points, faces = tio.generate_torus(2.0, 0.8, 25, 16)
    return build_setup(points, faces)


@pytest.fixture(scope="session")
def torus_spectrum(torus):
    return tg.eigendecompose(torus.con, 60)


@pytest.fixture(scope="session")
def torus_truth(torus):
    gen = tfields.generate_experiment_field(
        torus.cloud, torus.frames, torus.con, torus.lap, anchor_count=40, seed=7)
    return gen


@pytest.fixture(scope="session")
def icosphere():
    points, faces = tio.generate_icosphere(2)
    return build_setup(points, faces)


@pytest.fixture(scope="session")
def small_torus():
    points, faces = tio.generate_torus(2.0, 0.8, 10, 6)  # 60 vertices
    return build_setup(points, faces, k_neighbors=5)
