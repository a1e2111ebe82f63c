"""
Tests for volume compositing and mesh ray casting
"""

from functools import reduce

import numpy as np
import pytest

from conftest import axis_camera, opaque_voxel_grid
from voxfuse.errors import DomainError
from voxfuse.grid import Bounds, SparseVoxelGrid, Voxel, VoxelKey, front_to_back_order, morton_encode
from voxfuse.mesh import TriangleMesh, extract_mesh
from voxfuse.render import composite, ray_triangle_distance, ray_voxel_interval, raycast_mesh_depth, render
from voxfuse.sh import rgb_to_sh
from voxfuse.tsdf import TsdfField


def _unit_voxel(size=1.0):
    return Voxel(VoxelKey(0, 0), np.full(3, size / 2.0), size, np.ones(8), np.zeros((1, 3)))


def _random_grid(rng, center=(0.0, 0.0, 3.0), extent=2.0, level=2, count=30):
    cells = rng.choice(8 ** level, size=count, replace=False)
    side = 1 << level
    ijk = np.stack([cells % side, (cells // side) % side, cells // side ** 2], axis=1)
    return SparseVoxelGrid.from_cells(Bounds.cube(center, extent), level, ijk,
                                      densities=rng.uniform(0.0, 5.0, size=(count, 8)))


# -- ray / voxel intervals -------------------------------------------------

def test_axial_ray_crosses_full_edge():
    t = ray_voxel_interval([0.5, 0.5, -1.0], [0.0, 0.0, 1.0], _unit_voxel())
    assert t == pytest.approx((1.0, 2.0))


def test_ray_missing_voxel():
    assert ray_voxel_interval([2.0, 2.0, -1.0], [0.0, 0.0, 1.0], _unit_voxel()) is None


def test_diagonal_ray_length():
    d = np.ones(3) / np.sqrt(3.0)
    t_in, t_out = ray_voxel_interval([-1.0, -1.0, -1.0], d, _unit_voxel())
    assert t_out - t_in == pytest.approx(np.sqrt(3.0))


def test_non_unit_direction_rejected():
    with pytest.raises(DomainError):
        ray_voxel_interval([0.0, 0.0, -1.0], [0.0, 0.0, 2.0], _unit_voxel())


# -- compositing -------------------------------------------------------------

def test_empty_grid_renders_transparent(unit_bounds):
    out = render(SparseVoxelGrid(unit_bounds), axis_camera(position=(0.5, 0.5, -2.0)))
    assert np.all(out.alpha.scalar() == 0.0)
    assert not out.depth.valid.any()


@pytest.mark.parametrize("size", [1, 9, 33])
def test_opaque_voxel_depth_is_center_range(size):
    out = render(opaque_voxel_grid(), axis_camera(size=size))
    c = size // 2
    assert out.alpha.scalar()[c, c] == pytest.approx(1.0)
    assert out.depth.valid[c, c]
    assert out.depth.scalar()[c, c] == pytest.approx(2.0, abs=1e-3)
    np.testing.assert_allclose(out.color.values[c, c], [0.5, 0.5, 0.5], atol=1e-5)


def _stacked(with_back):
    grid = SparseVoxelGrid(Bounds((-1.0, -1.0, 1.0), (1.0, 1.0, 3.0)))
    grid.insert(morton_encode(0, 0, 0, 1), np.full(8, 1e4), rgb_to_sh([1.0, 0.0, 0.0])[None])
    if with_back:
        grid.insert(morton_encode(0, 0, 1, 1), np.full(8, 1e4), rgb_to_sh([0.0, 1.0, 0.0])[None])
    return grid


def test_opaque_front_voxel_hides_back_voxel():
    camera = axis_camera(position=(-0.5, -0.5, 0.0))
    both = render(_stacked(True), camera)
    front = render(_stacked(False), camera)
    np.testing.assert_allclose(both.color.values[4, 4], [1.0, 0.0, 0.0], atol=1e-5)
    assert both.depth.scalar()[4, 4] == pytest.approx(1.5, abs=1e-6)
    np.testing.assert_allclose(both.color.values, front.color.values, atol=1e-12)
    np.testing.assert_allclose(both.depth.values, front.depth.values, atol=1e-12, equal_nan=True)


def _pixel_hits(grid, camera):
    """Per pixel, the (voxel, segment length) pairs its ray passes through."""
    hits = []
    for direction in camera.pixel_directions():
        row = []
        for i in range(len(grid)):
            span = ray_voxel_interval(camera.center, direction, grid.voxel(i))
            if span is not None and span[1] > span[0]:
                row.append((i, span[1] - span[0]))
        hits.append(row)
    return hits


def test_alpha_and_depth_bounds(rng):
    grid = _random_grid(rng)
    camera = axis_camera(size=17, fov_deg=60.0)
    out = render(grid, camera)
    alpha = out.alpha.scalar()
    assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0 + 1e-9)
    ranges = camera.ranges(grid.centers())
    depth = out.depth.scalar().ravel()
    valid = out.depth.valid.ravel()
    assert valid.any()
    for p, row in enumerate(_pixel_hits(grid, camera)):
        if not valid[p]:
            continue
        seen = ranges[[i for i, _ in row]]
        assert seen.min() - 1e-5 <= depth[p] <= seen.max() + 1e-5


def test_transmittance_is_non_increasing(rng):
    count = 30
    cells = rng.choice(64, size=count, replace=False)
    ijk = np.stack([cells % 4, (cells // 4) % 4, cells // 16], axis=1)
    densities = np.repeat(rng.uniform(0.2, 3.0, size=(count, 1)), 8, axis=1)
    grid = SparseVoxelGrid.from_cells(Bounds.cube((0.0, 0.0, 3.0), 2.0), 2, ijk, densities=densities)
    camera = axis_camera(size=15, fov_deg=60.0)
    alpha_acc, weights, _, _ = composite(grid, camera, np.eye(count), with_geometry=False)
    rank = np.empty(count, dtype=np.int64)
    rank[front_to_back_order(grid, camera)] = np.arange(count)
    crossed = 0
    for p, row in enumerate(_pixel_hits(grid, camera)):
        if not row:
            assert alpha_acc[p] == 0.0
            continue
        row.sort(key=lambda hit: rank[hit[0]])
        ids = [i for i, _ in row]
        alpha = -np.expm1(-grid.densities[ids, 0].astype(np.float64) * np.array([d for _, d in row]))
        trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
        assert np.all(np.diff(trans) <= 1e-12)
        np.testing.assert_allclose(weights[p, ids], trans * alpha, atol=1e-9)
        assert alpha_acc[p] == pytest.approx(1.0 - np.prod(1.0 - alpha), abs=1e-9)
        crossed += len(row) > 1
    assert crossed > 0


def test_thread_count_does_not_change_output(rng):
    grid = _random_grid(rng)
    camera = axis_camera(size=24, fov_deg=60.0)
    single = render(grid, camera, threads=1, row_block=4)
    pooled = render(grid, camera, threads=4, row_block=4)
    np.testing.assert_array_equal(single.color.values, pooled.color.values)
    np.testing.assert_array_equal(single.depth.values, pooled.depth.values)
    np.testing.assert_array_equal(single.alpha.values, pooled.alpha.values)


def test_more_samples_keep_constant_density_exact():
    grid = opaque_voxel_grid(density=0.7)
    camera = axis_camera()
    one = render(grid, camera, samples_per_interval=1)
    four = render(grid, camera, samples_per_interval=4)
    np.testing.assert_allclose(one.alpha.values, four.alpha.values, atol=1e-6)
    assert one.alpha.scalar()[4, 4] == pytest.approx(1.0 - np.exp(-0.7), abs=1e-6)


# -- mesh ray casting ------------------------------------------------------

def test_raycast_single_triangle():
    mesh = TriangleMesh([[-0.1, -0.1, 3.0], [0.1, -0.1, 3.0], [0.0, 0.1, 3.0]], [[0, 1, 2]])
    depth = raycast_mesh_depth(mesh, axis_camera())
    assert depth.scalar()[4, 4] == pytest.approx(3.0)
    assert not depth.valid[0, 0]


def test_raycast_empty_mesh_is_invalid():
    assert not raycast_mesh_depth(TriangleMesh(), axis_camera()).valid.any()


def test_raycast_matches_per_triangle_minimum(rng):
    centers = np.column_stack([rng.uniform(-1.0, 1.0, 200), rng.uniform(-1.0, 1.0, 200),
                               rng.uniform(2.0, 4.0, 200)])
    verts = (centers[:, None, :] + rng.uniform(-0.3, 0.3, size=(200, 3, 3))).reshape(-1, 3)
    mesh = TriangleMesh(verts, np.arange(600).reshape(200, 3))
    camera = axis_camera(size=24, fov_deg=60.0)
    dirs = camera.pixel_directions()
    eye = camera.center[None]
    tris = verts.reshape(200, 3, 3)
    per_tri = [ray_triangle_distance(eye, dirs, t[0][None], t[1][None], t[2][None]) for t in tris]
    oracle = reduce(np.fmin, per_tri).reshape(24, 24)
    depth = raycast_mesh_depth(mesh, camera)
    np.testing.assert_array_equal(depth.valid, np.isfinite(oracle))
    np.testing.assert_allclose(depth.scalar(), oracle.astype(np.float32), rtol=1e-6, equal_nan=True)


def test_raycast_extracted_sphere():
    center = np.array([0.0, 0.0, 3.0])
    field = TsdfField.from_function(Bounds.cube(center, 2.0), 5, 0.2,
                                    lambda p: np.linalg.norm(p - center, axis=1) - 0.5)
    mesh = extract_mesh(field)
    depth = raycast_mesh_depth(mesh, axis_camera())
    assert depth.valid[4, 4]
    assert depth.scalar()[4, 4] == pytest.approx(2.5, abs=field.voxel_size)
