"""Dense feature maps from overlapping crops, and thresholded-cosine cleanup."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from voxfuse.camera import FeatureMap, ImagePlane
from voxfuse.errors import CoverageError, DegenerateFeatureError, DomainError
from voxfuse.models import AttentionConfig

logger = logging.getLogger(__name__)


@dataclass
class CropFeature:
    """Crop-local feature plane (h, w, D) whose top-left pixel sits at `anchor` (x, y)."""
    anchor: Tuple[int, int]
    feature: np.ndarray

    def __post_init__(self):
        self.anchor = (int(self.anchor[0]), int(self.anchor[1]))
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.feature.ndim == 2:
            self.feature = self.feature[:, :, None]
        if self.feature.ndim != 3:
            raise DomainError(f"crop feature must be (h, w, D), got shape {self.feature.shape}")
        if not np.all(np.isfinite(self.feature)):
            raise DomainError(f"crop at {self.anchor} has non-finite feature values")

    @property
    def width(self) -> int:
        return self.feature.shape[1]

    @property
    def height(self) -> int:
        return self.feature.shape[0]


def _axis_anchors(length: int, crop: int) -> List[int]:
    if crop >= length:
        return [0]
    step = max(crop // 2, 1)
    anchors = list(range(0, length - crop + 1, step))
    if anchors[-1] != length - crop:
        anchors.append(length - crop)
    return anchors


def crop_anchors(width: int, height: int, crop_size: int) -> List[Tuple[int, int, int, int]]:
    """Crop boxes (x, y, w, h) of size `crop_size` with 50% overlap; the last
    crop on each axis is aligned to the image edge."""
    cw, ch = min(crop_size, width), min(crop_size, height)
    return [(x, y, cw, ch) for y in _axis_anchors(height, ch) for x in _axis_anchors(width, cw)]


def _window(h: int, w: int, sigma_g: Optional[float], windowed: bool = True) -> np.ndarray:
    if not windowed:
        return np.ones((h, w))
    sy = sigma_g if sigma_g is not None else h / 4.0
    sx = sigma_g if sigma_g is not None else w / 4.0
    ys = np.arange(h) + 0.5 - h / 2.0
    xs = np.arange(w) + 0.5 - w / 2.0
    return np.exp(-0.5 * ((ys[:, None] / sy) ** 2 + (xs[None, :] / sx) ** 2))


def gaussian_window_blend(crops: Sequence[CropFeature], out_width: int, out_height: int,
                          sigma_g: Optional[float] = None, eps: float = 1e-8,
                          windowed: bool = True) -> FeatureMap:
    """Blend crops with a Gaussian window peaked at each crop's center.

    `sigma_g` defaults to a quarter of the crop extent per axis. With
    `windowed=False` every crop pixel weighs 1 and overlaps are plain means.
    """
    if not crops:
        raise CoverageError((0, 0), "no crops to blend")
    dims = {c.feature.shape[2] for c in crops}
    if len(dims) != 1:
        raise DomainError(f"crops disagree on feature dimension: {sorted(dims)}")
    dim = dims.pop()
    num = np.zeros((out_height, out_width, dim))
    den = np.zeros((out_height, out_width))
    covered = np.zeros((out_height, out_width), dtype=bool)
    for crop in crops:
        x, y = crop.anchor
        if x < 0 or y < 0 or x + crop.width > out_width or y + crop.height > out_height:
            raise DomainError(f"crop at {crop.anchor} of size {crop.width}x{crop.height} "
                              f"exceeds the {out_width}x{out_height} image")
        g = _window(crop.height, crop.width, sigma_g, windowed)
        num[y:y + crop.height, x:x + crop.width] += g[:, :, None] * crop.feature
        den[y:y + crop.height, x:x + crop.width] += g
        covered[y:y + crop.height, x:x + crop.width] = True
    if not np.all(covered):
        vy, vx = np.argwhere(~covered)[0]
        raise CoverageError((int(vx), int(vy)))
    out = num / (den + eps)[:, :, None]
    return ImagePlane(out, np.ones((out_height, out_width), dtype=bool))


# -- thresholded-cosine attention ------------------------------------------

def _lattice(length: int, stride: int) -> np.ndarray:
    idx = np.arange(0, length, stride)
    if idx[-1] != length - 1:
        idx = np.append(idx, length - 1)
    return idx


def _tokens(feat: FeatureMap, stride: int):
    if not np.all(feat.valid):
        raise DomainError("attention requires a fully valid feature map")
    ys = _lattice(feat.height, stride)
    xs = _lattice(feat.width, stride)
    tokens = feat.values[np.ix_(ys, xs)].astype(np.float64).reshape(-1, feat.channels)
    return ys, xs, tokens


def _aggregate(tokens: np.ndarray, cfg: AttentionConfig, threads: int) -> np.ndarray:
    norms = np.linalg.norm(tokens, axis=1)
    if np.any(norms == 0):
        raise DegenerateFeatureError(f"{int(np.sum(norms == 0))} zero-norm feature tokens")
    unit = tokens / norms[:, None]
    blocks = [(s, min(s + cfg.row_block, len(tokens))) for s in range(0, len(tokens), cfg.row_block)]

    def rows(block):
        lo, hi = block
        cos = unit[lo:hi] @ unit.T
        # negatively correlated pairs never contribute, whatever the threshold
        weights = np.where(cos > cfg.cos_threshold, np.maximum(cos, 0.0), 0.0)
        total = weights.sum(axis=1, keepdims=True)
        mixed = weights @ tokens
        return np.where(total > 0, mixed / np.where(total > 0, total, 1.0), tokens[lo:hi])

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(rows, blocks))
    else:
        parts = [rows(b) for b in blocks]
    return np.concatenate(parts, axis=0)


def _interp_axis(values: np.ndarray, knots: np.ndarray, length: int, axis: int) -> np.ndarray:
    """Linear interpolation of `values` sampled at `knots` onto 0..length-1 along `axis`."""
    pos = np.arange(length)
    if knots.size == 1:
        return np.repeat(values, length, axis=axis)
    seg = np.clip(np.searchsorted(knots, pos, side="right") - 1, 0, knots.size - 2)
    t = (pos - knots[seg]) / (knots[seg + 1] - knots[seg])
    lo = np.take(values, seg, axis=axis)
    hi = np.take(values, seg + 1, axis=axis)
    shape = [1] * values.ndim
    shape[axis] = length
    t = t.reshape(shape)
    return lo * (1.0 - t) + hi * t


def _upsample(tokens: np.ndarray, ys: np.ndarray, xs: np.ndarray, height: int, width: int) -> np.ndarray:
    grid = tokens.reshape(ys.size, xs.size, -1)
    grid = _interp_axis(grid, ys, height, axis=0)
    return _interp_axis(grid, xs, width, axis=1)


def _attend(feat: FeatureMap, cfg: AttentionConfig, passes: int, threads: int) -> FeatureMap:
    ys, xs, tokens = _tokens(feat, cfg.token_stride)
    for _ in range(passes):
        tokens = _aggregate(tokens, cfg, threads)
    out = _upsample(tokens, ys, xs, feat.height, feat.width)
    return ImagePlane(out, np.ones((feat.height, feat.width), dtype=bool))


def scra(feat: FeatureMap, cfg: AttentionConfig = AttentionConfig(), threads: int = 1) -> FeatureMap:
    """Recursive thresholded-cosine aggregation, `cfg.iterations` passes."""
    return _attend(feat, cfg, cfg.iterations, threads)


def scga(feat: FeatureMap, cfg: AttentionConfig = AttentionConfig(), threads: int = 1) -> FeatureMap:
    """One global thresholded-cosine aggregation pass."""
    return _attend(feat, cfg, 1, threads)


def refine(feat: FeatureMap, cfg: AttentionConfig = AttentionConfig(), threads: int = 1) -> FeatureMap:
    """SCRA followed by SCGA, or the map unchanged when attention is disabled."""
    if not cfg.enabled:
        return feat
    return scga(scra(feat, cfg, threads), cfg, threads)
