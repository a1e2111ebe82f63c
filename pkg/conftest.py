"""
Shared fixtures for the voxfuse test suite
"""

import numpy as np
import pytest

from voxfuse.camera import Camera, ImagePlane
from voxfuse.grid import Bounds, SparseVoxelGrid, morton_encode
from voxfuse.query import QueryEmbedding
from voxfuse.sh import rgb_to_sh


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance scenarios that take several seconds")


def axis_camera(size: int = 9, fov_deg: float = 90.0, position=(0.0, 0.0, 0.0)) -> Camera:
    """Camera with identity rotation (looking along +z); odd sizes put the
    center pixel's ray exactly on the optical axis."""
    pose = np.eye(4)
    pose[:3, 3] = position
    focal = 0.5 * size / np.tan(np.radians(fov_deg) / 2.0)
    return Camera.from_pose(pose, focal, focal, size / 2.0, size / 2.0, size, size)


def range_map(camera: Camera, plane_z: float) -> ImagePlane:
    """Ranges from `camera` to the plane z = plane_z (camera looking along +z)."""
    dirs = camera.pixel_directions().reshape(camera.height, camera.width, 3)
    ranges = (plane_z - camera.center[2]) / dirs[..., 2]
    return ImagePlane(ranges, np.ones((camera.height, camera.width), dtype=bool))


def opaque_voxel_grid(center=(0.0, 0.0, 2.0), extent: float = 1.0, density: float = 1e4,
                      rgb=(0.5, 0.5, 0.5)) -> SparseVoxelGrid:
    """Grid holding the single level-0 voxel that fills its bounds."""
    grid = SparseVoxelGrid(Bounds.cube(center, extent))
    sh = np.zeros((1, 3))
    sh[0] = rgb_to_sh(rgb)
    grid.insert(morton_encode(0, 0, 0, 0), np.full(8, density), sh)
    return grid


@pytest.fixture
def unit_bounds():
    return Bounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_cluster_grid():
    """Eight level-1 voxels: the x < 0.5 half carries features along e0, the
    other half along e1; voxel 7 is left unfused."""
    grid = SparseVoxelGrid.from_cells(Bounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), 1,
                                      np.array([[i, j, k] for k in range(2) for j in range(2) for i in range(2)]),
                                      densities=np.full((8, 8), 10.0))
    features = np.zeros((8, 4))
    weights = np.ones(8)
    cells = grid.cells()
    for i in range(8):
        axis = 0 if cells[i, 0] == 0 else 1
        features[i, axis] = 1.0 + 0.1 * i
        features[i, 2] = 0.05 * i
    features[7] = 0.0
    weights[7] = 0.0
    grid.set_features(features, weights)
    return grid


@pytest.fixture
def cluster_embeddings():
    return [QueryEmbedding("left", [1.0, 0.0, 0.0, 0.0]), QueryEmbedding("right", [0.0, 1.0, 0.0, 0.0])]
