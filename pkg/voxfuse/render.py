"""Alpha-composited rendering of the sparse grid and ray-cast mesh depth.

Each pixel ray walks the voxels in front-to-back order; voxel j contributes
alpha_j = 1 - exp(-mean_density_j * delta_j) with transmittance
T_j = prod_{m<j} (1 - alpha_m).
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from voxfuse.camera import Camera, ImagePlane
from voxfuse.errors import DomainError
from voxfuse.grid import SparseVoxelGrid, Voxel, front_to_back_order, slab_intervals, \
    trilinear_gradient_weights, trilinear_weights
from voxfuse.mesh import TriangleMesh

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-9
MAX_PAIRS_PER_CHUNK = 2_000_000


@dataclass
class RenderResult:
    color: ImagePlane
    depth: ImagePlane
    alpha: ImagePlane
    normal: ImagePlane


def ray_voxel_interval(origin, direction, voxel: Voxel) -> Optional[Tuple[float, float]]:
    """Entry/exit distances of a unit-direction ray against a voxel cube, or None on a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise DomainError("ray direction must be unit length")
    t_in, t_out, hit = slab_intervals(np.asarray(origin, dtype=np.float64)[None], direction[None],
                                      voxel.box_min[None], voxel.box_max[None])
    if not hit[0]:
        return None
    return float(t_in[0]), float(t_out[0])


# -- shared projection helpers ---------------------------------------------

def _box_pixel_ranges(camera: Camera, box_min: np.ndarray, box_max: np.ndarray):
    """Inclusive pixel ranges (x0, x1, y0, y1) whose centers may see each box.

    Boxes entirely behind the camera get an empty range; boxes crossing the
    camera plane get the whole image.
    """
    n = box_min.shape[0]
    offsets = np.array([[j & 1, (j >> 1) & 1, (j >> 2) & 1] for j in range(8)], dtype=np.float64)
    corners = box_min[:, None, :] + offsets[None] * (box_max - box_min)[:, None, :]
    u, v, z = camera.project(corners.reshape(-1, 3))
    u, v, z = u.reshape(n, 8), v.reshape(n, 8), z.reshape(n, 8)
    behind = np.all(z <= NEAR_PLANE, axis=1)
    straddle = np.any(z <= NEAR_PLANE, axis=1) & ~behind
    with np.errstate(invalid="ignore"):
        x0 = np.ceil(np.min(u, axis=1) - 0.5)
        x1 = np.floor(np.max(u, axis=1) - 0.5)
        y0 = np.ceil(np.min(v, axis=1) - 0.5)
        y1 = np.floor(np.max(v, axis=1) - 0.5)
    x0 = np.where(straddle, 0, x0)
    y0 = np.where(straddle, 0, y0)
    x1 = np.where(straddle, camera.width - 1, x1)
    y1 = np.where(straddle, camera.height - 1, y1)
    x0 = np.clip(np.nan_to_num(x0, nan=0), 0, camera.width).astype(np.int64)
    y0 = np.clip(np.nan_to_num(y0, nan=0), 0, camera.height).astype(np.int64)
    x1 = np.clip(np.nan_to_num(x1, nan=-1), -1, camera.width - 1).astype(np.int64)
    y1 = np.clip(np.nan_to_num(y1, nan=-1), -1, camera.height - 1).astype(np.int64)
    x1 = np.where(behind, -1, x1)
    return x0, x1, y0, y1


def _expand_pairs(ids: np.ndarray, x0, x1, y0, y1, row_start: int, row_stop: int, width: int):
    """All (id, pixel) pairs of the given pixel ranges restricted to rows
    [row_start, row_stop); pixels are indices local to the row block."""
    ya = np.maximum(y0, row_start)
    yb = np.minimum(y1, row_stop - 1)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(yb - ya + 1, 0)
    counts = nx * ny
    keep = counts > 0
    ids, x0, ya, nx, counts = ids[keep], x0[keep], ya[keep], nx[keep], counts[keep]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    owner = np.repeat(np.arange(ids.size), counts)
    starts = np.cumsum(counts) - counts
    off = np.arange(total) - starts[owner]
    px = x0[owner] + off % nx[owner]
    py = ya[owner] + off // nx[owner]
    return ids[owner], (py - row_start) * width + px


# -- volume compositing ----------------------------------------------------

@dataclass
class _Scene:
    camera: Camera
    rank: np.ndarray
    box_min: np.ndarray
    sizes: np.ndarray
    densities: np.ndarray
    ranges: np.ndarray
    values: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def _prepare(grid: SparseVoxelGrid, camera: Camera, values: np.ndarray) -> _Scene:
    order = front_to_back_order(grid, camera)
    rank = np.empty(len(grid), dtype=np.int64)
    rank[order] = np.arange(len(grid))
    box_min = grid.box_min()
    sizes = grid.sizes()
    x0, x1, y0, y1 = _box_pixel_ranges(camera, box_min, box_min + sizes[:, None])
    return _Scene(camera, rank, box_min, sizes, grid.densities.astype(np.float64),
                  camera.ranges(grid.centers()), values, x0, x1, y0, y1)


def _composite_rows(scene: _Scene, row_start: int, row_stop: int, samples: int, with_geometry: bool):
    cam = scene.camera
    width = cam.width
    npix = (row_stop - row_start) * width
    channels = scene.values.shape[1]
    alpha_acc = np.zeros(npix)
    value_acc = np.zeros((npix, channels))
    depth_acc = np.zeros(npix)
    normal_acc = np.zeros((npix, 3))
    if scene.rank.size == 0:
        return alpha_acc, value_acc, depth_acc, normal_acc

    vox, pix = _expand_pairs(np.arange(scene.rank.size), scene.x0, scene.x1, scene.y0, scene.y1,
                             row_start, row_stop, width)
    if vox.size == 0:
        return alpha_acc, value_acc, depth_acc, normal_acc
    dirs = cam.pixel_directions(row_start, row_stop)[pix]
    eye = cam.center
    lo = scene.box_min[vox]
    size = scene.sizes[vox]
    t_in, t_out, hit = slab_intervals(eye[None], dirs, lo, lo + size[:, None])
    keep = hit & (t_out > t_in)
    vox, pix, dirs, lo, size = vox[keep], pix[keep], dirs[keep], lo[keep], size[keep]
    t_in, t_out = t_in[keep], t_out[keep]
    if vox.size == 0:
        return alpha_acc, value_acc, depth_acc, normal_acc
    delta = t_out - t_in

    sigma = np.zeros(vox.size)
    corner_sigma = scene.densities[vox]
    for k in range(samples):
        t = t_in + (k + 0.5) / samples * delta
        local = np.clip((eye[None] + t[:, None] * dirs - lo) / size[:, None], 0.0, 1.0)
        sigma += np.sum(trilinear_weights(local) * corner_sigma, axis=1)
    sigma /= samples
    alpha = -np.expm1(-sigma * delta)

    order = np.lexsort((scene.rank[vox], pix))
    vox, pix, alpha = vox[order], pix[order], alpha[order]
    # position of each pair along its pixel's ray
    first = np.r_[True, pix[1:] != pix[:-1]]
    seg_start = np.maximum.accumulate(np.where(first, np.arange(pix.size), 0))
    pos = np.arange(pix.size) - seg_start
    seg_pixels = pix[first]
    seg_id = np.cumsum(first) - 1
    length = int(pos.max()) + 1
    table = np.zeros((seg_pixels.size, length))
    table[seg_id, pos] = alpha
    trans = np.ones_like(table)
    if length > 1:
        trans[:, 1:] = np.cumprod(1.0 - table[:, :-1], axis=1)
    weight = trans[seg_id, pos] * alpha

    alpha_acc += np.bincount(pix, weights=weight, minlength=npix)
    for c in range(channels):
        value_acc[:, c] = np.bincount(pix, weights=weight * scene.values[vox, c], minlength=npix)
    if with_geometry:
        depth_acc += np.bincount(pix, weights=weight * scene.ranges[vox], minlength=npix)
        t_in, delta, dirs, lo, size = (t_in[order], delta[order], dirs[order], lo[order], size[order])
        mid = eye[None] + (t_in + 0.5 * delta)[:, None] * dirs
        local = np.clip((mid - lo) / size[:, None], 0.0, 1.0)
        grad = np.einsum("mjk,mj->mk", trilinear_gradient_weights(local),
                         scene.densities[vox]) / size[:, None]
        gnorm = np.linalg.norm(grad, axis=1, keepdims=True)
        normals = np.divide(-grad, gnorm, out=np.zeros_like(grad), where=gnorm > 0)
        for c in range(3):
            normal_acc[:, c] = np.bincount(pix, weights=weight * normals[:, c], minlength=npix)
    return alpha_acc, value_acc, depth_acc, normal_acc


def composite(grid: SparseVoxelGrid, camera: Camera, values: np.ndarray,
              samples_per_interval: int = 1, threads: int = 1, row_block: int = 32,
              with_geometry: bool = True):
    """Composite per-voxel `values` (N, C) into a camera; returns flat
    accumulators (alpha, values, depth sum, normal sum) over all pixels."""
    if samples_per_interval < 1:
        raise DomainError("samples_per_interval must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2 or values.shape[0] != len(grid):
        raise DomainError(f"values of shape {values.shape} do not match {len(grid)} voxels")
    scene = _prepare(grid, camera, values)
    blocks = [(r, min(r + row_block, camera.height)) for r in range(0, camera.height, row_block)]

    def work(block):
        return _composite_rows(scene, block[0], block[1], samples_per_interval, with_geometry)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


def render(grid: SparseVoxelGrid, camera: Camera, samples_per_interval: int = 1,
           alpha_valid_min: float = 0.5, threads: int = 1, row_block: int = 32) -> RenderResult:
    h, w = camera.height, camera.width
    colors = grid.colors(np.arange(len(grid)), camera.center) if len(grid) else np.zeros((0, 3))
    alpha, color, depth_sum, normal_sum = composite(grid, camera, colors, samples_per_interval,
                                                    threads, row_block, with_geometry=True)
    solid = alpha >= alpha_valid_min
    depth = np.divide(depth_sum, alpha, out=np.full_like(depth_sum, np.nan), where=solid)
    nnorm = np.linalg.norm(normal_sum, axis=1, keepdims=True)
    normal_valid = solid & (nnorm[:, 0] > 0)
    normal = np.divide(normal_sum, nnorm, out=np.full_like(normal_sum, np.nan), where=normal_valid[:, None])
    all_valid = np.ones((h, w), dtype=bool)
    return RenderResult(
        color=ImagePlane(color.reshape(h, w, 3), all_valid),
        depth=ImagePlane(depth.reshape(h, w, 1), solid.reshape(h, w)),
        alpha=ImagePlane(alpha.reshape(h, w, 1), all_valid),
        normal=ImagePlane(normal.reshape(h, w, 3), normal_valid.reshape(h, w)),
    )


# -- mesh ray casting ------------------------------------------------------

def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
                     a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
                     a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]], axis=-1)


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def ray_triangle_distance(origins: np.ndarray, dirs: np.ndarray, v0: np.ndarray,
                          v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Möller-Trumbore ray/triangle distances (broadcast over leading dims);
    NaN where the ray misses or the hit is not in front of the origin."""
    e1 = v1 - v0
    e2 = v2 - v0
    p = _cross(dirs, e2)
    det = _dot(e1, p)
    ok = det != 0.0
    inv = 1.0 / np.where(ok, det, 1.0)
    s = origins - v0
    u = _dot(s, p) * inv
    q = _cross(s, e1)
    v = _dot(dirs, q) * inv
    t = _dot(e2, q) * inv
    hit = ok & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t > NEAR_PLANE)
    return np.where(hit, t, np.nan)


def raycast_mesh_depth(mesh: TriangleMesh, camera: Camera) -> ImagePlane:
    """Nearest positive hit distance along each pixel ray; no hit is invalid."""
    h, w = camera.height, camera.width
    best = np.full(h * w, np.inf)
    if mesh.triangles.shape[0]:
        verts = np.asarray(mesh.vertices, dtype=np.float64)
        if not np.all(np.isfinite(verts)):
            raise DomainError("mesh vertices must be finite")
        tris = verts[mesh.triangles]
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        x0, x1, y0, y1 = _box_pixel_ranges(camera, lo, hi)
        dirs_all = camera.pixel_directions()
        eye = camera.center
        area = np.maximum(x1 - x0 + 1, 0) * np.maximum(y1 - y0 + 1, 0)
        ids = np.arange(tris.shape[0])
        chunks = np.split(ids, np.searchsorted(np.cumsum(area), np.arange(
            MAX_PAIRS_PER_CHUNK, max(int(area.sum()), 1), MAX_PAIRS_PER_CHUNK)))
        for chunk in chunks:
            if chunk.size == 0:
                continue
            tri, pix = _expand_pairs(chunk, x0[chunk], x1[chunk], y0[chunk], y1[chunk], 0, h, w)
            if tri.size == 0:
                continue
            t = ray_triangle_distance(eye[None], dirs_all[pix], tris[tri, 0], tris[tri, 1], tris[tri, 2])
            hit = ~np.isnan(t)
            np.minimum.at(best, pix[hit], t[hit])
    valid = np.isfinite(best)
    return ImagePlane(np.where(valid, best, np.nan).reshape(h, w, 1), valid.reshape(h, w))
