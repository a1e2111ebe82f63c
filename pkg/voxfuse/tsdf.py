"""Truncated signed distance fields on the corner lattice of one octree level.

A field at level L stores phi and weight for every corner of the
(2^L + 1)^3 lattice spanning the scene bounds. Unobserved corners hold
phi = NaN and weight = 0.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from voxfuse.camera import Camera, DepthMap
from voxfuse.errors import DomainError, EmptyDomainError
from voxfuse.grid import Bounds
from voxfuse.models import TsdfConfig

logger = logging.getLogger(__name__)

MAX_TSDF_LEVEL = 8


class TsdfField:
    def __init__(self, bounds: Bounds, level: int, trunc: float):
        if not 1 <= level <= MAX_TSDF_LEVEL:
            raise DomainError(f"TSDF level must be in [1, {MAX_TSDF_LEVEL}], got {level}")
        if not trunc > 0:
            raise DomainError("truncation distance must be positive")
        self.bounds = bounds
        self.level = level
        self.trunc = float(trunc)
        n = self.resolution
        self.phi = np.full((n, n, n), np.nan)
        self.weight = np.zeros((n, n, n))

    @property
    def resolution(self) -> int:
        """Corners per axis."""
        return (1 << self.level) + 1

    @property
    def voxel_size(self) -> float:
        return float(self.bounds.voxel_size(self.level))

    @classmethod
    def from_function(cls, bounds: Bounds, level: int, trunc: float,
                      sdf: Callable[[np.ndarray], np.ndarray]) -> "TsdfField":
        """Field with every corner observed once at the clamped value of `sdf`."""
        field = cls(bounds, level, trunc)
        pts = field.corner_positions().reshape(-1, 3)
        values = np.asarray(sdf(pts), dtype=np.float64).reshape(field.phi.shape)
        field.phi = np.clip(values, -field.trunc, field.trunc)
        field.weight = np.ones_like(field.phi)
        return field

    def copy(self) -> "TsdfField":
        other = TsdfField(self.bounds, self.level, self.trunc)
        other.phi = self.phi.copy()
        other.weight = self.weight.copy()
        return other

    def corner_positions(self, x_start: int = 0, x_stop: Optional[int] = None) -> np.ndarray:
        """World positions of corners with x index in [x_start, x_stop), shape (nx, n, n, 3)."""
        n = self.resolution
        x_stop = n if x_stop is None else x_stop
        ix, iy, iz = np.meshgrid(np.arange(x_start, x_stop), np.arange(n), np.arange(n), indexing="ij")
        ijk = np.stack([ix, iy, iz], axis=-1).astype(np.float64)
        return self.bounds.min_array + ijk * self.voxel_size

    def observed(self) -> np.ndarray:
        return self.weight > 0

    def observed_count(self) -> int:
        return int(np.count_nonzero(self.weight > 0))

    def corner(self, ijk: Sequence[int]) -> Tuple[float, float]:
        """(phi, weight) of one lattice corner."""
        i, j, k = (int(c) for c in ijk)
        n = self.resolution
        if not (0 <= i < n and 0 <= j < n and 0 <= k < n):
            raise DomainError(f"corner {tuple(ijk)} outside level-{self.level} lattice")
        return float(self.phi[i, j, k]), float(self.weight[i, j, k])

    def corners(self) -> dict:
        """Observed corners as {(i, j, k): (phi, weight)}."""
        idx = np.argwhere(self.weight > 0)
        return {tuple(int(c) for c in ijk): (float(self.phi[tuple(ijk)]), float(self.weight[tuple(ijk)]))
                for ijk in idx}

    def unobserve(self, mask: np.ndarray) -> None:
        self.phi[mask] = np.nan
        self.weight[mask] = 0.0


def _integrate_slab(field: TsdfField, camera: Camera, depth: np.ndarray, valid: np.ndarray,
                    x_start: int, x_stop: int) -> None:
    pts = field.corner_positions(x_start, x_stop).reshape(-1, 3)
    u, v, z = camera.project(pts)
    ahead = z > 0
    px = np.floor(np.where(ahead, u, -1.0))
    py = np.floor(np.where(ahead, v, -1.0))
    inside = ahead & (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    px = np.where(inside, px, 0).astype(np.int64)
    py = np.where(inside, py, 0).astype(np.int64)
    ok = inside & valid[py, px]
    sd = depth[py, px].astype(np.float64) - camera.ranges(pts)
    upd = ok & (sd > -field.trunc)
    if not np.any(upd):
        return
    shape = (x_stop - x_start,) + field.phi.shape[1:]
    upd = upd.reshape(shape)
    sd = np.clip(sd.reshape(shape), -field.trunc, field.trunc)
    phi = field.phi[x_start:x_stop]
    w = field.weight[x_start:x_stop]
    seen = w > 0
    new_phi = np.where(seen, (w * np.where(seen, phi, 0.0) + sd) / (w + 1.0), sd)
    phi[upd] = new_phi[upd]
    w[upd] += 1.0


def integrate_depth(field: TsdfField, camera: Camera, depth: DepthMap,
                    slab: int = 8, threads: int = 1) -> TsdfField:
    """Projective TSDF update of every lattice corner from one posed depth map (in place)."""
    if depth.width != camera.width or depth.height != camera.height:
        raise DomainError("depth map size does not match camera")
    values = depth.scalar()
    valid = depth.valid & np.isfinite(values)
    if np.any(values[valid] <= 0):
        raise DomainError("depth values must be positive")
    n = field.resolution
    slabs = [(s, min(s + slab, n)) for s in range(0, n, slab)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda s: _integrate_slab(field, camera, values, valid, *s), slabs))
    else:
        for s in slabs:
            _integrate_slab(field, camera, values, valid, *s)
    return field


def blend_multilevel(fine: TsdfField, coarse_levels: Sequence[TsdfField],
                     tau_q: float = 0.3, temperature: float = 0.5) -> TsdfField:
    """Fill and soften the fine field with coarser observations.

    Each fine corner blends with the coarse corner at its integer-divided
    coordinate: alpha = 0 where fine is unobserved, 1 where coarse is
    unobserved, otherwise sigmoid((W_fine - tau) / (tau * temperature)) with
    tau the `tau_q` quantile of observed fine weights.

    W_fine is the weight of the input fine field on every level; corners
    filled by an earlier coarse level keep W_fine = 0. The returned field
    carries the filled weight so that weight > 0 still marks observed corners.
    """
    if not 0.0 < tau_q < 1.0:
        raise DomainError("tau_q must lie in (0, 1)")
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    observed = fine.weight > 0
    if not np.any(observed):
        raise EmptyDomainError("cannot blend an empty fine TSDF field")
    tau = float(np.quantile(fine.weight[observed], tau_q))
    result = fine.copy()
    alpha_fine = expit((fine.weight - tau) / (tau * temperature))
    for coarse in coarse_levels:
        if coarse.level >= fine.level:
            raise DomainError(f"coarse level {coarse.level} is not coarser than fine level {fine.level}")
        if not (np.array_equal(coarse.bounds.min_array, fine.bounds.min_array)
                and np.array_equal(coarse.bounds.max_array, fine.bounds.max_array)):
            raise DomainError("coarse and fine fields cover different bounds")
        ratio = 1 << (fine.level - coarse.level)
        idx = np.arange(fine.resolution) // ratio
        c_phi = coarse.phi[np.ix_(idx, idx, idx)]
        c_weight = coarse.weight[np.ix_(idx, idx, idx)]
        f_phi = result.phi
        f_none = ~(result.weight > 0)
        c_none = ~(c_weight > 0)
        alpha = np.where(f_none, 0.0, np.where(c_none, 1.0, alpha_fine))
        mixed = alpha * np.nan_to_num(f_phi) + (1.0 - alpha) * np.nan_to_num(c_phi)
        blended = np.where(f_none & c_none, np.nan, np.where(f_none, c_phi, np.where(c_none, f_phi, mixed)))
        result.phi = np.clip(blended, -result.trunc, result.trunc)
        result.weight = np.where(f_none & ~c_none, c_weight, result.weight)
        logger.debug(f"Blended level {coarse.level} into level {fine.level} (tau={tau:.3f})")
    return result


def fuse_levels(bounds: Bounds, views: Iterable[Tuple[Camera, DepthMap]], config: TsdfConfig,
                threads: int = 1) -> Tuple[TsdfField, List[TsdfField], TsdfField]:
    """Integrate the same views at the fine level and each coarse level, then blend.

    Returns (fine, coarse fields finest first, blended).
    """
    views = list(views)
    fine_edge = float(bounds.voxel_size(config.level))
    trunc = config.trunc_voxels * fine_edge
    levels = [config.level - k for k in range(config.coarse_levels + 1) if config.level - k >= 1]
    fields = [TsdfField(bounds, lv, trunc) for lv in levels]
    for i, (camera, depth) in enumerate(views):
        for field in fields:
            integrate_depth(field, camera, depth, slab=config.slab, threads=threads)
        logger.debug(f"Integrated view {i} at levels {levels}")
    fine, coarse = fields[0], fields[1:]
    logger.info(f"TSDF fine level {fine.level}: {fine.observed_count()} observed corners from {len(views)} views")
    if fine.observed_count() == 0:
        return fine, coarse, fine.copy()
    blended = blend_multilevel(fine, coarse, config.tau_q, config.temperature)
    return fine, coarse, blended
