"""
Tests for confidence-weighted multi-view feature fusion
"""

import numpy as np
import pytest

from conftest import axis_camera, opaque_voxel_grid, range_map
from voxfuse.camera import Camera, ImagePlane
from voxfuse.errors import DomainError, EmptyDomainError
from voxfuse.fuse3d import ViewBundle, confidence_map, fuse, sample_bilinear, spatial_weight, visible
from voxfuse.grid import Bounds, SparseVoxelGrid
from voxfuse.models import FusionConfig


def _constant_feature(vector, size=9):
    values = np.broadcast_to(np.asarray(vector, dtype=np.float64), (size, size, len(vector)))
    return ImagePlane(values, np.ones((size, size), dtype=bool))


def _facing_view(feature_vector):
    """Camera at (0, 0, 4) looking down -z at the plane z = 2."""
    pose = np.diag([-1.0, 1.0, -1.0, 1.0])
    pose[2, 3] = 4.0
    camera = Camera.from_pose(pose, 4.5, 4.5, 4.5, 4.5, 9, 9)
    depth = range_map(camera, 2.0)
    return ViewBundle(camera, _constant_feature(feature_vector), depth, depth)


def _front_view(feature_vector):
    camera = axis_camera()
    depth = range_map(camera, 2.0)
    return ViewBundle(camera, _constant_feature(feature_vector), depth, depth)


def _random_setup(rng, count=200, dim=5, views=3):
    cells = rng.choice(512, size=count, replace=False)
    ijk = np.stack([cells % 8, (cells // 8) % 8, cells // 64], axis=1)
    grid = SparseVoxelGrid.from_cells(Bounds.cube((0.0, 0.0, 3.0), 2.0), 3, ijk)
    bundles = []
    for k in range(views):
        angle = 2.0 * np.pi * k / views
        eye = (2.5 * np.cos(angle), 2.5 * np.sin(angle), 1.0)
        camera = Camera.look_at(eye, (0.0, 0.0, 3.0), 16, 16)
        feature = ImagePlane(rng.normal(size=(16, 16, dim)), np.ones((16, 16), dtype=bool))
        d_ren = ImagePlane.from_array(rng.uniform(2.0, 3.5, size=(16, 16)))
        d_mesh = ImagePlane.from_array(d_ren.scalar() + rng.normal(scale=0.1, size=(16, 16)))
        bundles.append(ViewBundle(camera, feature, d_ren, d_mesh))
    return grid, bundles


def _fuse_one(grid, i, views, cfg):
    """Fused feature and weight of voxel i computed view by view."""
    voxel = grid.voxel(i)
    num, den = 0.0, 0.0
    for view in views:
        if not visible(voxel, view, cfg.occlusion_margin):
            continue
        u, v, _ = view.camera.project(voxel.center[None])
        px, py = int(np.floor(u[0])), int(np.floor(v[0]))
        z = view.camera.ranges(voxel.center[None])[0]
        d_ren = view.depth_ren.scalar()[py, px] if view.depth_ren.valid[py, px] else np.nan
        conf = view.confidence(cfg.sigma_c).scalar()[py, px]
        w = spatial_weight(z, d_ren, cfg.beta) * conf
        if w > 0:
            num = num + w * sample_bilinear(view.feature, u, v)[0]
            den += w
    return np.asarray(num) / (den + cfg.eps), den


# -- weights ---------------------------------------------------------------

def test_spatial_weight_reference_values():
    beta = 0.25
    assert spatial_weight(2.0, 2.0, beta) == 1.0
    assert spatial_weight(2.0 + beta, 2.0, beta) == pytest.approx(np.exp(-0.5))
    assert spatial_weight(2.0 - 2 * beta, 2.0, beta) == pytest.approx(np.exp(-2.0))
    assert spatial_weight(2.0, np.nan, beta) == 0.0


def test_confidence_map_reference_values():
    sigma = 0.5
    d_mesh = ImagePlane.from_array(np.array([[2.0, 3.0, np.nan]]))
    d_ren = ImagePlane.from_array(np.array([[2.0, 2.0, 2.0]]))
    conf = confidence_map(d_mesh, d_ren, sigma).scalar()[0]
    np.testing.assert_allclose(conf, [1.0, np.exp(-1.0), 0.0], rtol=1e-6)


def test_visibility_against_surface():
    view = _front_view([1.0])
    margin = 0.1

    def voxel_at(*center):
        return opaque_voxel_grid(center=center, extent=0.1).voxel(0)

    assert visible(voxel_at(0.0, 0.0, 2.0), view, margin)
    assert visible(voxel_at(0.0, 0.0, 2.05), view, margin)
    assert not visible(voxel_at(0.0, 0.0, 2.0 + 10 * margin), view, margin)
    assert visible(voxel_at(0.0, 0.0, 2.0 + 10 * margin), view, 11 * margin)
    assert not visible(voxel_at(5.0, 0.0, 2.0), view, margin)


def test_bilinear_sample_at_pixel_center():
    values = np.arange(12, dtype=np.float64).reshape(3, 4)
    plane = ImagePlane.from_array(values)
    np.testing.assert_allclose(sample_bilinear(plane, np.array([1.5]), np.array([2.5]))[:, 0], [9.0])
    np.testing.assert_allclose(sample_bilinear(plane, np.array([2.0]), np.array([0.5]))[:, 0], [1.5])


# -- fusion ----------------------------------------------------------------

def test_single_view_fuses_its_feature():
    grid = opaque_voxel_grid()
    fuse(grid, [_front_view([0.2, -0.4, 1.0])], FusionConfig(beta=0.25, sigma_c=0.5, occlusion_margin=0.5))
    np.testing.assert_allclose(grid.features[0], np.array([0.2, -0.4, 1.0]) / (1.0 + 1e-8), rtol=1e-6)
    assert grid.weight_sum[0] == pytest.approx(1.0)


def test_two_views_average():
    grid = opaque_voxel_grid()
    fa, fb = np.array([1.0, 0.0]), np.array([0.0, 3.0])
    fuse(grid, [_front_view(fa), _facing_view(fb)], FusionConfig(beta=0.25, sigma_c=0.5, occlusion_margin=0.5))
    np.testing.assert_allclose(grid.features[0], (fa + fb) / (2.0 + 1e-8), rtol=1e-6)
    assert grid.weight_sum[0] == pytest.approx(2.0)


@pytest.mark.parametrize("batch_size", [1, 7, 200])
def test_batching_matches_per_voxel_oracle(rng, batch_size):
    grid, views = _random_setup(rng)
    cfg = FusionConfig(batch_size=batch_size)
    stats = fuse(grid, views, cfg)
    assert stats.peak_accumulator_bytes == min(batch_size, len(grid)) * (5 + 1) * 8
    assert stats.batches == -(-len(grid) // batch_size)
    resolved = cfg.resolved(grid.finest_voxel_size())
    fused = grid.fused_mask()
    assert fused.any()
    for i in range(len(grid)):
        feature, weight = _fuse_one(grid, i, views, resolved)
        assert grid.weight_sum[i] == pytest.approx(weight, rel=1e-5, abs=1e-12)
        if weight > 0:
            np.testing.assert_allclose(grid.features[i], feature, rtol=1e-4, atol=1e-6)
        else:
            assert np.all(grid.features[i] == 0.0)


def test_batch_size_does_not_change_result(rng):
    grid, views = _random_setup(rng)
    small = grid.copy()
    fuse(grid, views, FusionConfig(batch_size=200))
    fuse(small, views, FusionConfig(batch_size=7))
    np.testing.assert_allclose(small.features, grid.features, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(small.weight_sum, grid.weight_sum, rtol=1e-6)


def test_zero_confidence_view_is_ignored(rng):
    grid, views = _random_setup(rng)
    blind = views[0]
    blind = ViewBundle(blind.camera, blind.feature, blind.depth_ren, ImagePlane.empty(16, 16))
    with_blind = grid.copy()
    fuse(grid, views[1:], FusionConfig())
    stats = fuse(with_blind, views[1:] + [blind], FusionConfig())
    assert stats.view_confidence[-1] == 0.0
    np.testing.assert_array_equal(with_blind.features, grid.features)
    np.testing.assert_array_equal(with_blind.weight_sum, grid.weight_sum)


def test_thread_count_does_not_change_result(rng):
    grid, views = _random_setup(rng)
    pooled = grid.copy()
    fuse(grid, views, FusionConfig(batch_size=16), threads=1)
    fuse(pooled, views, FusionConfig(batch_size=16), threads=4)
    np.testing.assert_array_equal(pooled.features, grid.features)
    np.testing.assert_array_equal(pooled.weight_sum, grid.weight_sum)


def test_fusion_needs_views():
    with pytest.raises(DomainError):
        fuse(opaque_voxel_grid(), [])


def test_fusion_needs_voxels(unit_bounds):
    with pytest.raises(EmptyDomainError):
        fuse(SparseVoxelGrid(unit_bounds), [_front_view([1.0])])


def test_view_size_mismatch_rejected():
    depth = range_map(axis_camera(), 2.0)
    with pytest.raises(DomainError):
        ViewBundle(axis_camera(), _constant_feature([1.0], size=5), depth, depth)


def test_fused_norm_bounded_by_sample_norms(rng):
    grid, views = _random_setup(rng)
    cfg = FusionConfig()
    fuse(grid, views, cfg)
    resolved = cfg.resolved(grid.finest_voxel_size())
    fused = np.flatnonzero(grid.fused_mask())
    assert fused.size > 0
    for i in fused:
        voxel = grid.voxel(i)
        norms = []
        for view in views:
            if visible(voxel, view, resolved.occlusion_margin):
                u, v, _ = view.camera.project(voxel.center[None])
                norms.append(np.linalg.norm(sample_bilinear(view.feature, u, v)[0]))
        assert np.linalg.norm(grid.features[i]) <= max(norms) * (1.0 + 1e-5)


def _offset_mesh_view(feature_vector, offset):
    view = _front_view(feature_vector)
    if offset is None:
        mesh = ImagePlane.empty(9, 9)
    else:
        mesh = ImagePlane.from_array(view.depth_ren.scalar() + offset)
    return ViewBundle(view.camera, view.feature, view.depth_ren, mesh)


def test_raising_confidence_moves_feature_along_chord():
    fa, fb = np.array([1.0, 0.0, 0.5]), np.array([0.0, 2.0, -1.0])
    cfg = FusionConfig(beta=0.25, sigma_c=0.5, occlusion_margin=0.5)
    positions = []
    for offset in (None, 2.0, 0.5, 0.0):
        grid = opaque_voxel_grid()
        fuse(grid, [_offset_mesh_view(fa, offset), _facing_view(fb)], cfg)
        f = grid.features[0].astype(np.float64)
        t = (f - fb) @ (fa - fb) / ((fa - fb) @ (fa - fb))
        np.testing.assert_allclose(f, fb + t * (fa - fb), atol=1e-6)
        positions.append(t)
    assert positions[0] == pytest.approx(0.0, abs=1e-6)
    assert positions[-1] == pytest.approx(0.5, abs=1e-6)
    assert np.all(np.diff(positions) > 0)
    conf = np.exp(-2.0)
    assert positions[1] == pytest.approx(conf / (1.0 + conf), abs=1e-6)


def test_fusion_without_confidence_uses_spatial_weight_only():
    fa, fb = np.array([1.0, 0.0]), np.array([0.0, 3.0])
    views = [_offset_mesh_view(fa, 2.0), _facing_view(fb)]
    cfg = FusionConfig(beta=0.25, sigma_c=0.5, occlusion_margin=0.5, use_confidence=False)
    grid = opaque_voxel_grid()
    stats = fuse(grid, views, cfg)
    assert stats.view_confidence == [1.0, 1.0]
    np.testing.assert_allclose(grid.features[0], (fa + fb) / 2.0, rtol=1e-6)
    weighted = opaque_voxel_grid()
    fuse(weighted, views, cfg.model_copy(update={"use_confidence": True}))
    assert weighted.weight_sum[0] < grid.weight_sum[0]
