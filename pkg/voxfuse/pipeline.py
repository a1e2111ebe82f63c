"""Pipeline stages shared by the CLI and the service: build, stitch, fuse, query, evaluate."""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from voxfuse.camera import ImagePlane
from voxfuse.errors import DataError, EmptyDomainError
from voxfuse.feat2d import gaussian_window_blend, refine
from voxfuse.fuse3d import FusionStats, ViewBundle, fuse
from voxfuse.geomreg import normal_loss, normals_from_depth, patch_depth_loss
from voxfuse.grid import SparseVoxelGrid
from voxfuse.mesh import TriangleMesh, extract_mesh
from voxfuse.models import BuildConfig, Settings
from voxfuse.query import (QueryEmbedding, aggregate, localization_hit, mask3d, mean_class_accuracy, metrics,
                           per_class_iou, relevance, render_relevance, transfer_pointcloud)
from voxfuse.render import raycast_mesh_depth, render
from voxfuse.scene import Scene
from voxfuse.synth import nearest_primitive_labels
from voxfuse.tsdf import TsdfField, fuse_levels

logger = logging.getLogger(__name__)


@dataclass
class BuildResult:
    grid: SparseVoxelGrid
    fine: TsdfField
    coarse: List[TsdfField]
    blended: TsdfField


@dataclass
class Evaluation:
    rows: List[Dict] = field(default_factory=list)
    summary: Dict[str, Optional[float]] = field(default_factory=dict)


def voxelize(tsdf: TsdfField, cfg: BuildConfig = BuildConfig()) -> SparseVoxelGrid:
    """Activate every cell with a corner inside the truncation band.

    Corner density is density_scale / edge * sigmoid(-phi / (sharpness * edge)),
    with unobserved corners treated as free space (+trunc).
    """
    observed = tsdf.weight > 0
    near = observed & (np.abs(np.nan_to_num(tsdf.phi, nan=np.inf)) < tsdf.trunc)
    n = tsdf.resolution - 1
    active = np.zeros((n, n, n), dtype=bool)
    for j in range(8):
        i, k, l = j & 1, (j >> 1) & 1, (j >> 2) & 1
        active |= near[i:i + n, k:k + n, l:l + n]
    ijk = np.argwhere(active)
    edge = tsdf.voxel_size
    phi = np.where(observed, tsdf.phi, tsdf.trunc)
    densities = np.empty((len(ijk), 8))
    for j in range(8):
        off = np.array([j & 1, (j >> 1) & 1, (j >> 2) & 1])
        c = ijk + off
        densities[:, j] = cfg.density_scale / edge * expit(-phi[c[:, 0], c[:, 1], c[:, 2]] / (cfg.density_sharpness * edge))
    grid = SparseVoxelGrid.from_cells(tsdf.bounds, tsdf.level, ijk, densities, sh_degree=cfg.sh_degree,
                                      rgb=(cfg.base_gray,) * 3)
    logger.info(f"Activated {len(grid)} voxels at level {tsdf.level}")
    return grid


def build(scene: Scene, settings: Settings) -> BuildResult:
    started = time.perf_counter()
    tsdf_cfg = settings.tsdf.model_copy(update={"level": scene.level}) if scene.level else settings.tsdf
    fine, coarse, blended = fuse_levels(scene.bounds, zip(scene.cameras, scene.depths), tsdf_cfg,
                                        threads=settings.threads)
    if blended.observed_count() == 0:
        raise EmptyDomainError("no TSDF corner was observed; check depth maps and bounds")
    grid = voxelize(blended, settings.build)
    logger.info(f"Build finished in {time.perf_counter() - started:.1f}s")
    return BuildResult(grid, fine, coarse, blended)


def stitch(scene: Scene, settings: Settings) -> List[ImagePlane]:
    """Per-view feature maps from crops (blend + attention cleanup), or the given maps."""
    out = []
    for i, cam in enumerate(scene.cameras):
        if scene.crops[i]:
            feat = gaussian_window_blend(scene.crops[i], cam.width, cam.height,
                                         settings.stitch.sigma_g, settings.stitch.eps,
                                         settings.stitch.windowed)
            out.append(refine(feat, settings.attention, settings.threads))
        elif scene.features[i] is not None:
            out.append(scene.features[i])
        else:
            raise DataError(f"view '{scene.names[i]}' has neither a feature map nor crops")
    return out


def view_bundles(grid: SparseVoxelGrid, scene: Scene, mesh: TriangleMesh, features: Sequence[ImagePlane],
                 settings: Settings) -> List[ViewBundle]:
    bundles = []
    for cam, feat in zip(scene.cameras, features):
        rendered = render(grid, cam, settings.render.samples_per_interval, settings.render.alpha_valid_min,
                          settings.threads, settings.render.row_block)
        bundles.append(ViewBundle(cam, feat, rendered.depth, raycast_mesh_depth(mesh, cam)))
    return bundles


def fuse_scene(grid: SparseVoxelGrid, scene: Scene, mesh: TriangleMesh, settings: Settings,
               features: Optional[Sequence[ImagePlane]] = None) -> FusionStats:
    features = list(features) if features is not None else stitch(scene, settings)
    bundles = view_bundles(grid, scene, mesh, features, settings)
    return fuse(grid, bundles, settings.fusion, settings.threads)


def voxel_ground_truth(scene: Scene, grid: SparseVoxelGrid) -> np.ndarray:
    if not scene.primitives:
        raise DataError("scene has no analytic primitives for voxel ground truth")
    return nearest_primitive_labels(scene.primitives, grid.centers())


def _best_view(scene: Scene, class_id: int) -> Optional[int]:
    counts = [int(np.count_nonzero(lab.valid & (lab.scalar() == class_id))) if lab is not None else 0
              for lab in scene.labels]
    if not counts or max(counts) == 0:
        return None
    return int(np.argmax(counts))


def evaluate(scene: Scene, grid: SparseVoxelGrid, settings: Settings,
             embeddings: Optional[Sequence[QueryEmbedding]] = None) -> Evaluation:
    """Per-query 3D retrieval metrics with localization, plus geometry losses
    and point transfer when the scene provides their ground truth."""
    embeddings = list(embeddings if embeddings is not None else scene.embeddings)
    if not embeddings:
        raise DataError("scene has no query embeddings")
    result = Evaluation()
    fused = grid.fused_mask()
    gt_labels = voxel_ground_truth(scene, grid) if scene.primitives else None
    for class_id, emb in enumerate(embeddings):
        q = relevance(grid, emb)
        mask = np.zeros(len(grid), dtype=bool)
        mask[mask3d(grid, q, settings.query.threshold).indices] = True
        row = {"label": emb.label}
        if gt_labels is not None:
            row.update(metrics(mask[fused], (gt_labels == class_id)[fused]))
        view = _best_view(scene, class_id)
        row["loc_hit"] = None
        if view is not None:
            rel = render_relevance(grid, q, scene.cameras[view], settings.render.samples_per_interval,
                                   settings.threads, settings.render.row_block)
            lab = scene.labels[view]
            row["loc_hit"] = localization_hit(rel, lab.valid & (lab.scalar() == class_id))
        result.rows.append(row)
        logger.info(f"Query '{emb.label}': {row}")
    if gt_labels is not None:
        result.summary.update(aggregate(result.rows))
    result.summary.update(geometry_losses(scene, grid, settings))
    if scene.points is not None and scene.point_labels is not None and len(scene.points):
        transfer = transfer_pointcloud(grid, scene.points, embeddings, settings.transfer.k,
                                       settings.transfer.cell_voxels, settings.transfer.chunk, settings.threads)
        result.summary["point_macc"] = mean_class_accuracy(transfer.labels, scene.point_labels, len(embeddings))
        result.summary["point_miou"] = float(np.nanmean(per_class_iou(transfer.labels, scene.point_labels,
                                                                      len(embeddings))))
    return result


def geometry_losses(scene: Scene, grid: SparseVoxelGrid, settings: Settings) -> Dict[str, Optional[float]]:
    """Mean depth-patch and normal consistency between renders and input depth."""
    depth_losses, normal_losses = [], []
    for cam, depth in zip(scene.cameras, scene.depths):
        rendered = render(grid, cam, settings.render.samples_per_interval, settings.render.alpha_valid_min,
                          settings.threads, settings.render.row_block)
        try:
            depth_losses.append(patch_depth_loss(rendered.depth, depth, settings.patch))
        except EmptyDomainError:
            pass
        try:
            normal_losses.append(normal_loss(rendered.normal, normals_from_depth(depth, cam)))
        except EmptyDomainError:
            pass
    return {
        "patch_depth_loss": float(np.mean(depth_losses)) if depth_losses else None,
        "normal_loss": float(np.mean(normal_losses)) if normal_losses else None,
    }


def run_all(scene: Scene, settings: Settings) -> Tuple[BuildResult, TriangleMesh, FusionStats, Evaluation]:
    """synth-to-metrics in memory: build, mesh, fuse, evaluate."""
    built = build(scene, settings)
    mesh = extract_mesh(built.blended)
    stats = fuse_scene(built.grid, scene, mesh, settings)
    return built, mesh, stats, evaluate(scene, built.grid, settings)
