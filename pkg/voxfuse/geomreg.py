"""Geometric consistency metrics between rendered and prior depth/normal maps."""
import numpy as np

from voxfuse.camera import Camera, DepthMap, ImagePlane, NormalMap
from voxfuse.errors import DomainError, EmptyDomainError
from voxfuse.models import PatchSpec


def _check_same_size(a: ImagePlane, b: ImagePlane) -> None:
    if not a.same_size(b):
        raise DomainError(f"map sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def _patch_windows(values: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """(P, size*size) patches with origins on the stride lattice."""
    windows = np.lib.stride_tricks.sliding_window_view(values, (spec.size, spec.size))
    windows = windows[::spec.stride, ::spec.stride]
    return windows.reshape(-1, spec.size * spec.size)


def patch_depth_loss(d_ren: DepthMap, d_prior: DepthMap, spec: PatchSpec = PatchSpec()) -> float:
    """Mean over patches of the squared distance between standardized depths.

    By default only patches fully valid in both maps participate; with
    `spec.masked` a patch uses statistics over its jointly valid pixels.
    """
    _check_same_size(d_ren, d_prior)
    if d_ren.height < spec.size or d_ren.width < spec.size:
        raise EmptyDomainError("image is smaller than one patch")
    a = d_ren.scalar().astype(np.float64)
    b = d_prior.scalar().astype(np.float64)
    joint = d_ren.valid & d_prior.valid
    pa = _patch_windows(a, spec)
    pb = _patch_windows(b, spec)
    pm = _patch_windows(joint, spec)
    if spec.masked:
        count = pm.sum(axis=1)
        take = count >= 2
    else:
        take = pm.all(axis=1)
    if not np.any(take):
        raise EmptyDomainError("no patch is valid in both depth maps")
    pa, pb, pm = pa[take], pb[take], pm[take]
    n = pm.sum(axis=1, keepdims=True)
    pa = np.where(pm, pa, 0.0)
    pb = np.where(pm, pb, 0.0)

    def standardize(x):
        mu = x.sum(axis=1, keepdims=True) / n
        var = np.where(pm, (x - mu) ** 2, 0.0).sum(axis=1, keepdims=True) / n
        return np.where(pm, (x - mu) / np.maximum(np.sqrt(var), spec.eps_std), 0.0)

    diff = standardize(pa) - standardize(pb)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def normal_loss(n_ren: NormalMap, n_prior: NormalMap) -> float:
    """Mean over jointly valid pixels of 1 - n_ren . n_prior."""
    _check_same_size(n_ren, n_prior)
    joint = n_ren.valid & n_prior.valid
    if not np.any(joint):
        raise EmptyDomainError("no pixel is valid in both normal maps")
    a = n_ren.values[joint].astype(np.float64)
    b = n_prior.values[joint].astype(np.float64)
    dots = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    return float(np.mean(1.0 - dots))


def normals_from_depth(depth: DepthMap, camera: Camera) -> NormalMap:
    """World-space normals from central differences of back-projected pixels,
    oriented toward the camera."""
    h, w = camera.height, camera.width
    if depth.width != w or depth.height != h:
        raise DomainError("depth map size does not match camera")
    dirs = camera.pixel_directions().reshape(h, w, 3)
    d = depth.scalar().astype(np.float64)
    pts = camera.center + dirs * d[..., None]
    valid = depth.valid.copy()
    normals = np.full((h, w, 3), np.nan)
    ok = np.zeros((h, w), dtype=bool)
    if h >= 3 and w >= 3:
        dx = pts[1:-1, 2:] - pts[1:-1, :-2]
        dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
        n = np.cross(dx, dy)
        inner = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1] & valid[1:-1, 1:-1])
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        inner &= norm[..., 0] > 0
        n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
        facing = np.sum(n * dirs[1:-1, 1:-1], axis=-1) > 0
        n[facing] = -n[facing]
        normals[1:-1, 1:-1] = n
        ok[1:-1, 1:-1] = inner
    return ImagePlane(normals, ok)
