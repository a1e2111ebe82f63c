"""
Tests for open-vocabulary relevance, masks, point transfer, metrics and editing
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import softmax

from conftest import axis_camera, opaque_voxel_grid
from voxfuse.camera import ImagePlane
from voxfuse.errors import DegenerateFeatureError, DomainError, EmptyDomainError
from voxfuse.grid import Bounds, SparseVoxelGrid, VoxelKey
from voxfuse.knn import SpatialHash, squared_distances
from voxfuse.query import (QueryEmbedding, QueryResult, aggregate, edit_voxels, feature_pca_colors, iou, localization_hit,
                           mask2d, mask3d, mean_class_accuracy, metrics, min_max, per_class_iou, region_mask,
                           relevance, render_relevance, solid_color_sh, transfer_pointcloud)
from voxfuse.render import render
from voxfuse.sh import sh_to_rgb

E0 = QueryEmbedding("e0", [1.0, 0.0])


def _three_voxel_grid():
    """Voxels whose features have cosine 0.2, 0.5 and 0.8 with e0."""
    grid = SparseVoxelGrid.from_cells(Bounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), 1,
                                      np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]))
    cos = np.array([0.2, 0.5, 0.8])
    grid.set_features(np.stack([cos, np.sqrt(1.0 - cos ** 2)], axis=1), np.ones(3))
    return grid


def _random_fused_grid(rng, count=50, dim=6):
    cells = rng.choice(512, size=count, replace=False)
    ijk = np.stack([cells % 8, (cells // 8) % 8, cells // 64], axis=1)
    grid = SparseVoxelGrid.from_cells(Bounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), 3, ijk)
    grid.set_features(rng.normal(size=(count, dim)), np.ones(count))
    return grid


# -- relevance -------------------------------------------------------------

def test_min_max_reference_values():
    np.testing.assert_allclose(min_max(np.array([0.2, 0.5, 0.8])), [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(min_max(np.array([0.3, 0.3])), [0.5, 0.5])
    out = min_max(np.array([np.nan, 1.0, 3.0]))
    assert np.isnan(out[0]) and out[2] == 1.0


def test_relevance_normalizes_over_fused_voxels():
    q = relevance(_three_voxel_grid(), E0)
    np.testing.assert_allclose(q.raw, [0.2, 0.5, 0.8], atol=1e-6)
    np.testing.assert_allclose(q.normalized, [0.0, 0.5, 1.0], atol=1e-5)


def test_relevance_skips_unfused_voxels(two_cluster_grid, cluster_embeddings):
    q = relevance(two_cluster_grid, cluster_embeddings[0])
    assert np.isnan(q.raw[7]) and np.isnan(q.normalized[7])
    assert np.nanmin(q.normalized) == 0.0 and np.nanmax(q.normalized) == 1.0


def test_relevance_ignores_vector_scale(two_cluster_grid):
    a = relevance(two_cluster_grid, QueryEmbedding("a", [1.0, 0.2, 0.0, 0.0]))
    b = relevance(two_cluster_grid, QueryEmbedding("b", [5.0, 1.0, 0.0, 0.0]))
    np.testing.assert_allclose(a.raw, b.raw, atol=1e-12)
    scaled = two_cluster_grid.copy()
    scaled.set_features(scaled.features * 3.0, scaled.weight_sum)
    c = relevance(scaled, QueryEmbedding("a", [1.0, 0.2, 0.0, 0.0]))
    np.testing.assert_allclose(a.raw, c.raw, atol=1e-6)


def test_constant_scores_normalize_to_half():
    grid = _three_voxel_grid()
    grid.set_features(np.tile([0.6, 0.8], (3, 1)), np.ones(3))
    q = relevance(grid, E0)
    np.testing.assert_array_equal(q.normalized, [0.5, 0.5, 0.5])
    assert mask3d(grid, q, 0.5).indices.size == 3


def test_dimension_mismatch_rejected(two_cluster_grid):
    with pytest.raises(DomainError):
        relevance(two_cluster_grid, E0)


def test_unfused_grid_rejected():
    grid = _three_voxel_grid()
    grid.set_features(grid.features, np.zeros(3))
    with pytest.raises(EmptyDomainError):
        relevance(grid, E0)


def test_zero_embedding_rejected():
    with pytest.raises(DegenerateFeatureError):
        QueryEmbedding("nothing", [0.0, 0.0])


# -- 3D and 2D masks -------------------------------------------------------

def test_mask3d_threshold():
    grid = _three_voxel_grid()
    q = relevance(grid, E0)
    mask = mask3d(grid, q, 0.6)
    assert mask.indices.tolist() == [2]
    assert mask.keys == [grid.key(2)]
    np.testing.assert_allclose(mask.points, grid.centers()[[2]])
    assert q.threshold == 0.6 and q.mask.tolist() == [False, False, True]
    assert mask3d(grid, q, 0.0).indices.tolist() == [0, 1, 2]


def test_mask3d_excludes_unfused(two_cluster_grid, cluster_embeddings):
    q = relevance(two_cluster_grid, cluster_embeddings[1])
    assert 7 not in mask3d(two_cluster_grid, q, 0.0).indices.tolist()


@pytest.mark.parametrize("threshold", [-0.1, 1.5])
def test_mask3d_threshold_range(threshold):
    grid = _three_voxel_grid()
    with pytest.raises(DomainError):
        mask3d(grid, relevance(grid, E0), threshold)


def test_cluster_masks_split_the_grid(two_cluster_grid, cluster_embeddings):
    cells = two_cluster_grid.cells()
    for emb, side in zip(cluster_embeddings, (0, 1)):
        mask = mask3d(two_cluster_grid, relevance(two_cluster_grid, emb), 0.6)
        expected = [i for i in range(7) if cells[i, 0] == side]
        assert mask.indices.tolist() == expected


def test_render_relevance_of_opaque_voxel():
    grid = opaque_voxel_grid()
    grid.set_features(np.array([[1.0, 0.0]]), np.ones(1))
    rel = render_relevance(grid, relevance(grid, E0), axis_camera())
    assert rel.scalar()[4, 4] == pytest.approx(0.5, abs=1e-6)
    assert rel.scalar()[0, 0] == pytest.approx(0.0)


@pytest.mark.parametrize("score", [0.25, 1.0])
def test_render_relevance_of_uniform_score_is_scaled_alpha(rng, score):
    count = 20
    cells = rng.choice(64, size=count, replace=False)
    ijk = np.stack([cells % 4, (cells // 4) % 4, cells // 16], axis=1)
    grid = SparseVoxelGrid.from_cells(Bounds.cube((0.0, 0.0, 3.0), 2.0), 2, ijk,
                                      densities=rng.uniform(0.0, 4.0, size=(count, 8)))
    camera = axis_camera(size=15, fov_deg=60.0)
    result = QueryResult("uniform", np.zeros(count), np.full(count, score), np.ones(count, dtype=bool))
    rel = render_relevance(grid, result, camera)
    alpha = render(grid, camera).alpha.scalar()
    assert alpha.max() > 0.1
    np.testing.assert_allclose(rel.scalar(), score * alpha, atol=1e-6)


def test_render_relevance_of_empty_grid(unit_bounds):
    result = QueryResult("none", np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool))
    rel = render_relevance(SparseVoxelGrid(unit_bounds), result, axis_camera())
    assert np.all(rel.scalar() == 0.0)


def test_mask2d_and_localization():
    values = np.zeros((4, 4))
    values[1, 2] = 2.0
    values[1, 1] = 1.0
    rel = ImagePlane.from_array(values)
    np.testing.assert_array_equal(np.argwhere(mask2d(rel, 0.6)), [[1, 2]])
    assert localization_hit(rel, (2, 0, 4, 2))
    assert not localization_hit(rel, (0, 0, 2, 4))
    box = np.zeros((4, 4), dtype=bool)
    box[1, 2] = True
    assert localization_hit(rel, box)
    assert not localization_hit(ImagePlane.empty(4, 4), box)


def test_region_mask_forms():
    assert region_mask((1, 0, 3, 2), 4, 3).sum() == 4
    with pytest.raises(DomainError):
        region_mask((1, 2, 3), 4, 3)


# -- point-cloud transfer --------------------------------------------------

def _class_probs(features, embeddings):
    f = features / np.linalg.norm(features, axis=1, keepdims=True)
    q = np.stack([e.unit for e in embeddings])
    return softmax(np.clip(f @ q.T, -1.0, 1.0), axis=1)


def test_transfer_single_neighbour(two_cluster_grid, cluster_embeddings):
    centers = two_cluster_grid.centers()
    out = transfer_pointcloud(two_cluster_grid, centers[[0, 1]] + 0.01, cluster_embeddings, k=1)
    probs = _class_probs(two_cluster_grid.features[[0, 1]].astype(np.float64), cluster_embeddings)
    np.testing.assert_allclose(out.probabilities, probs, atol=1e-9)
    assert out.labels.tolist() == [0, 1]


def test_transfer_equidistant_neighbours(two_cluster_grid, cluster_embeddings):
    out = transfer_pointcloud(two_cluster_grid, [[0.5, 0.25, 0.25]], cluster_embeddings, k=2)
    probs = _class_probs(two_cluster_grid.features[[0, 1]].astype(np.float64), cluster_embeddings)
    np.testing.assert_allclose(out.probabilities[0], probs.mean(axis=0), atol=1e-9)


def test_transfer_matches_brute_force(rng):
    grid = _random_fused_grid(rng)
    embeddings = [QueryEmbedding(f"c{c}", rng.normal(size=6)) for c in range(3)]
    points = rng.uniform(-0.2, 1.2, size=(100, 3))
    out = transfer_pointcloud(grid, points, embeddings, k=8, chunk=13, threads=3)
    probs = _class_probs(grid.features.astype(np.float64), embeddings)
    centers = grid.centers()
    for p, point in enumerate(points):
        d2 = squared_distances(point, centers)
        near = np.lexsort((np.arange(len(d2)), d2))[:8]
        w = np.exp(-0.5 * d2[near])
        expected = (w[:, None] * probs[near]).sum(axis=0) / w.sum()
        np.testing.assert_allclose(out.probabilities[p], expected, atol=1e-9)
    np.testing.assert_allclose(out.probabilities.sum(axis=1), 1.0)


def test_transfer_needs_embeddings(two_cluster_grid):
    with pytest.raises(DomainError):
        transfer_pointcloud(two_cluster_grid, np.zeros((1, 3)), [])


coords = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)
point_lists = st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=60)


@given(points=point_lists, query=st.tuples(coords, coords, coords), k=st.integers(min_value=1, max_value=10),
       cell=st.floats(min_value=0.25, max_value=1.5))
@settings(max_examples=150, deadline=None)
def test_spatial_hash_matches_brute_force(points, query, k, cell):
    points = np.asarray(points)
    ids, d2 = SpatialHash(points, cell).query(query, k)
    brute = squared_distances(np.asarray(query), points)
    order = np.lexsort((np.arange(len(points)), brute))[:k]
    np.testing.assert_array_equal(ids, order)
    np.testing.assert_array_equal(d2, brute[order])


@pytest.mark.parametrize("query", [(5.0, 5.0, 5.0), (-3.0, 0.05, 0.05), (1e30, 0.0, 0.0)])
def test_spatial_hash_far_query(rng, query):
    points = rng.random((50, 3)) * 0.1
    ids, d2 = SpatialHash(points, 0.01).query(query, 8)
    brute = squared_distances(np.asarray(query), points)
    np.testing.assert_array_equal(ids, np.lexsort((np.arange(50), brute))[:8])
    np.testing.assert_array_equal(d2, np.sort(brute)[:8])


def test_spatial_hash_rejects_non_finite_point(rng):
    index = SpatialHash(rng.random((10, 3)), 0.1)
    for bad in ((np.nan, 0.0, 0.0), (0.0, np.inf, 0.0)):
        with pytest.raises(DomainError):
            index.query(bad, 3)


def test_transfer_rejects_non_finite_points(two_cluster_grid, cluster_embeddings):
    with pytest.raises(DomainError):
        transfer_pointcloud(two_cluster_grid, np.array([[np.nan, 0.5, 0.5]]), cluster_embeddings)


# -- metrics ---------------------------------------------------------------

def test_iou_reference_values():
    assert iou([True, True, False], [True, False, False]) == 0.5
    assert iou([False, False], [False, False]) == 1.0
    assert iou([True, False], [False, True]) == 0.0
    with pytest.raises(DomainError):
        iou([True], [True, False])


def test_metrics_and_aggregate():
    row = metrics(np.array([True, True, False, False]), np.array([True, False, False, True]))
    assert row["iou"] == pytest.approx(1 / 3)
    assert row["acc25_hit"] and row["recall"] == 0.5
    rows = [dict(row, loc_hit=True), {"iou": 0.1, "acc25_hit": False, "recall": 0.2, "loc_hit": None}]
    summary = aggregate(rows)
    assert summary["miou"] == pytest.approx((1 / 3 + 0.1) / 2)
    assert summary["acc25"] == 0.5
    assert summary["macc"] == pytest.approx(0.35)
    assert summary["loc_acc"] == 1.0
    with pytest.raises(EmptyDomainError):
        aggregate([])


def test_per_class_scores():
    pred = np.array([0, 0, 1, 1, 2])
    gt = np.array([0, 1, 1, 1, 0])
    np.testing.assert_allclose(per_class_iou(pred, gt, 4)[:3], [1 / 3, 2 / 3, 0.0])
    assert np.isnan(per_class_iou(pred, gt, 4)[3])
    assert mean_class_accuracy(pred, gt, 4) == pytest.approx((0.5 + 2 / 3) / 2)


# -- editing and visualization --------------------------------------------

def test_edit_recolors_rendered_voxel():
    grid = opaque_voxel_grid()
    edit_voxels(grid, [grid.key(0)], solid_color_sh([1.0, 0.0, 0.0], grid.sh_degree))
    out = render(grid, axis_camera())
    np.testing.assert_allclose(out.color.values[4, 4], [1.0, 0.0, 0.0], atol=1e-5)


def test_solid_color_has_only_a_dc_term():
    sh = solid_color_sh([0.2, 0.4, 0.9], 2)
    assert sh.shape == (9, 3)
    assert np.all(sh[1:] == 0.0)
    np.testing.assert_allclose(sh_to_rgb(sh[0]), [0.2, 0.4, 0.9], atol=1e-12)


def test_edit_rejects_unknown_key_and_bad_shape():
    grid = opaque_voxel_grid()
    with pytest.raises(DomainError):
        edit_voxels(grid, [VoxelKey(1, 0)], solid_color_sh([1.0, 0.0, 0.0], 0))
    with pytest.raises(DomainError):
        edit_voxels(grid, [grid.key(0)], solid_color_sh([1.0, 0.0, 0.0], 1))


def test_feature_pca_colors(two_cluster_grid):
    colors = feature_pca_colors(two_cluster_grid)
    assert colors.shape == (8, 3)
    assert np.all((colors >= 0.0) & (colors <= 1.0))
    np.testing.assert_array_equal(colors[7], [0.5, 0.5, 0.5])
