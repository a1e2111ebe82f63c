"""Confidence-weighted multi-view fusion of 2D feature maps into voxel features.

For voxel i and visible view k:

    w_ik = exp(-(z_ik - D_ren,k)^2 / 2 beta^2) * exp(-|D_mesh,k - D_ren,k| / 2 sigma_c)
    F_i  = sum_k w_ik f_ik / (sum_k w_ik + eps)

Voxels are processed in disjoint batches so accumulator memory is bounded by
the batch size, not the grid size.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from voxfuse.camera import Camera, ConfidenceMap, DepthMap, FeatureMap, ImagePlane
from voxfuse.errors import DomainError, EmptyDomainError
from voxfuse.grid import SparseVoxelGrid, Voxel
from voxfuse.models import FusionConfig

logger = logging.getLogger(__name__)


@dataclass
class ViewBundle:
    camera: Camera
    feature: FeatureMap
    depth_ren: DepthMap
    depth_mesh: DepthMap

    def __post_init__(self):
        for name in ("feature", "depth_ren", "depth_mesh"):
            plane = getattr(self, name)
            if plane.width != self.camera.width or plane.height != self.camera.height:
                raise DomainError(f"{name} is {plane.width}x{plane.height}, camera is "
                                  f"{self.camera.width}x{self.camera.height}")

    def confidence(self, sigma_c: float) -> ConfidenceMap:
        return confidence_map(self.depth_mesh, self.depth_ren, sigma_c)


@dataclass
class FusionStats:
    peak_accumulator_bytes: int = 0
    batches: int = 0
    view_confidence: List[float] = field(default_factory=list)
    unfused_fraction: float = 0.0


def spatial_weight(z, d_ren, beta: float):
    """Gaussian proximity of depth z to the rendered surface; 0 where d_ren is invalid."""
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d_ren, dtype=np.float64)
    ok = np.isfinite(d)
    w = np.exp(-((z - np.where(ok, d, 0.0)) ** 2) / (2.0 * beta * beta))
    w = np.where(ok, w, 0.0)
    return float(w) if w.ndim == 0 else w


def confidence_map(d_mesh: DepthMap, d_ren: DepthMap, sigma_c: float) -> ConfidenceMap:
    if not d_mesh.same_size(d_ren):
        raise DomainError("mesh and rendered depth maps differ in size")
    a = d_mesh.scalar().astype(np.float64)
    b = d_ren.scalar().astype(np.float64)
    both = d_mesh.valid & d_ren.valid
    conf = np.where(both, np.exp(-np.abs(np.where(both, a - b, 0.0)) / (2.0 * sigma_c)), 0.0)
    return ImagePlane(conf, np.ones_like(both))


def _nearest_pixel(camera: Camera, points: np.ndarray):
    """Pixel indices containing each projection plus in-image and in-front flags."""
    u, v, z = camera.project(points)
    ahead = z > 0
    px = np.floor(np.where(ahead, u, -1.0))
    py = np.floor(np.where(ahead, v, -1.0))
    inside = ahead & (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    return (np.where(inside, px, 0).astype(np.int64), np.where(inside, py, 0).astype(np.int64),
            u, v, inside)


def _visible(view: ViewBundle, points: np.ndarray, margin: float):
    px, py, u, v, inside = _nearest_pixel(view.camera, points)
    z = view.camera.ranges(points)
    mesh_ok = view.depth_mesh.valid[py, px]
    ren_ok = view.depth_ren.valid[py, px]
    d_mesh = view.depth_mesh.scalar()[py, px].astype(np.float64)
    d_ren = view.depth_ren.scalar()[py, px].astype(np.float64)
    ref = np.where(mesh_ok, d_mesh, np.where(ren_ok, d_ren, np.nan))
    with np.errstate(invalid="ignore"):
        vis = inside & (mesh_ok | ren_ok) & (z <= ref + margin)
    return vis, px, py, u, v, z


def visible(voxel: Voxel, view: ViewBundle, margin: float) -> bool:
    vis = _visible(view, np.asarray(voxel.center, dtype=np.float64)[None], margin)[0]
    return bool(vis[0])


def sample_bilinear(plane: ImagePlane, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear samples at continuous pixel coordinates (pixel centers at +0.5),
    clamped to the image edge and renormalized over valid neighbours."""
    x = np.asarray(u, dtype=np.float64) - 0.5
    y = np.asarray(v, dtype=np.float64) - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    values = plane.values
    out = np.zeros((x.size, plane.channels))
    total = np.zeros(x.size)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = np.clip(x0 + dx, 0, plane.width - 1).astype(np.int64)
            yi = np.clip(y0 + dy, 0, plane.height - 1).astype(np.int64)
            ok = plane.valid[yi, xi]
            w = np.where(ok, wx * wy, 0.0)
            out += w[:, None] * np.where(ok[:, None], values[yi, xi], 0.0)
            total += w
    return np.divide(out, total[:, None], out=np.zeros_like(out), where=total[:, None] > 0)


def _fuse_batch(centers: np.ndarray, views: Sequence[ViewBundle], confidences: Sequence[np.ndarray],
                cfg: FusionConfig, dim: int):
    num = np.zeros((centers.shape[0], dim))
    den = np.zeros(centers.shape[0])
    for view, conf in zip(views, confidences):
        vis, px, py, u, v, z = _visible(view, centers, cfg.occlusion_margin)
        if not np.any(vis):
            continue
        d_ren = np.where(view.depth_ren.valid[py, px], view.depth_ren.scalar()[py, px], np.nan)
        w = spatial_weight(z, d_ren, cfg.beta) * conf[py, px]
        w = np.where(vis, w, 0.0)
        sel = w > 0
        if not np.any(sel):
            continue
        num[sel] += w[sel, None] * sample_bilinear(view.feature, u[sel], v[sel])
        den[sel] += w[sel]
    return num, den


def fuse(grid: SparseVoxelGrid, views: Sequence[ViewBundle], cfg: FusionConfig = FusionConfig(),
         threads: int = 1) -> FusionStats:
    """Populate grid.features and grid.weight_sum in place; returns fusion statistics."""
    if not views:
        raise DomainError("fusion needs at least one view")
    if len(grid) == 0:
        raise EmptyDomainError("cannot fuse into an empty grid")
    dims = {v.feature.channels for v in views}
    if len(dims) != 1:
        raise DomainError(f"views disagree on feature dimension: {sorted(dims)}")
    dim = dims.pop()
    cfg = cfg.resolved(grid.finest_voxel_size())
    if cfg.use_confidence:
        confidences = [v.confidence(cfg.sigma_c).scalar().astype(np.float64) for v in views]
    else:
        confidences = [np.ones((v.camera.height, v.camera.width)) for v in views]
    stats = FusionStats(view_confidence=[float(c.mean()) for c in confidences])
    centers = grid.centers()
    n = len(grid)
    features = np.zeros((n, dim), dtype=np.float32)
    weight_sum = np.zeros(n, dtype=np.float32)
    batches = [(s, min(s + cfg.batch_size, n)) for s in range(0, n, cfg.batch_size)]

    def work(batch):
        lo, hi = batch
        num, den = _fuse_batch(centers[lo:hi], views, confidences, cfg, dim)
        weight_sum[lo:hi] = den
        fused = weight_sum[lo:hi] > 0
        features[lo:hi] = np.where(fused[:, None], num / (den + cfg.eps)[:, None], 0.0)
        return num.nbytes + den.nbytes

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sizes = list(pool.map(work, batches))
    else:
        sizes = [work(b) for b in batches]
    stats.peak_accumulator_bytes = max(sizes)
    stats.batches = len(batches)
    grid.set_features(features, weight_sum)
    stats.unfused_fraction = float(np.mean(~grid.fused_mask()))
    for k, c in enumerate(stats.view_confidence):
        logger.debug(f"View {k}: mean confidence {c:.3f}")
    if stats.unfused_fraction > 0:
        logger.warning(f"{stats.unfused_fraction:.1%} of voxels received no feature")
    logger.info(f"Fused {n} voxels in {stats.batches} batches")
    return stats
