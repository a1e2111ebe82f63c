"""Open-vocabulary retrieval over a fused grid.

Relevance is the cosine similarity between a voxel's fused feature and a
query embedding, min-max normalized over fused voxels per query.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from voxfuse.camera import Camera, ImagePlane
from voxfuse.errors import DegenerateFeatureError, DomainError, EmptyDomainError
from voxfuse.grid import SparseVoxelGrid, VoxelKey
from voxfuse.knn import SpatialHash
from voxfuse.render import composite
from voxfuse.sh import num_coeffs, rgb_to_sh

logger = logging.getLogger(__name__)

CONSTANT_RANGE = 1e-12


@dataclass
class QueryEmbedding:
    label: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).ravel()
        if self.vector.size == 0 or not np.all(np.isfinite(self.vector)):
            raise DomainError(f"embedding '{self.label}' must be a finite non-empty vector")
        if np.linalg.norm(self.vector) == 0:
            raise DegenerateFeatureError(f"embedding '{self.label}' has zero norm")

    @property
    def unit(self) -> np.ndarray:
        return self.vector / np.linalg.norm(self.vector)


@dataclass
class QueryResult:
    """Per-voxel scores; unfused voxels hold NaN in `raw` and `normalized`."""
    label: str
    raw: np.ndarray
    normalized: np.ndarray
    fused: np.ndarray
    threshold: Optional[float] = None
    mask: Optional[np.ndarray] = None


@dataclass
class Mask3D:
    indices: np.ndarray
    keys: List[VoxelKey]
    points: np.ndarray


@dataclass
class TransferResult:
    probabilities: np.ndarray
    labels: np.ndarray


def _cosine(features: np.ndarray, unit_queries: np.ndarray) -> np.ndarray:
    """Cosine of each feature row against unit query rows; zero-norm features score 0."""
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    unit = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    return np.clip(unit @ unit_queries.T, -1.0, 1.0)


def min_max(values: np.ndarray) -> np.ndarray:
    """Rescale finite entries to [0, 1]; a constant set maps to 0.5."""
    out = np.full(values.shape, np.nan)
    finite = np.isfinite(values)
    if not np.any(finite):
        return out
    lo, hi = values[finite].min(), values[finite].max()
    if hi - lo <= CONSTANT_RANGE:
        out[finite] = 0.5
    else:
        out[finite] = (values[finite] - lo) / (hi - lo)
    return out


def _check_fused(grid: SparseVoxelGrid, dim: int) -> np.ndarray:
    if grid.feature_dim != dim:
        raise DomainError(f"embedding has dimension {dim}, grid features have {grid.feature_dim}")
    fused = grid.fused_mask()
    if not np.any(fused):
        raise EmptyDomainError("grid has no fused voxel")
    return fused


def relevance(grid: SparseVoxelGrid, q: QueryEmbedding) -> QueryResult:
    fused = _check_fused(grid, q.vector.size)
    raw = np.full(len(grid), np.nan)
    raw[fused] = _cosine(grid.features[fused], q.unit[None])[:, 0]
    return QueryResult(q.label, raw, min_max(raw), fused)


def mask3d(grid: SparseVoxelGrid, result: QueryResult, threshold: float) -> Mask3D:
    """Fused voxels whose normalized score reaches `threshold`; records the mask on `result`."""
    if not 0.0 <= threshold <= 1.0:
        raise DomainError("threshold must lie in [0, 1]")
    with np.errstate(invalid="ignore"):
        mask = result.fused & (np.nan_to_num(result.normalized, nan=-1.0) >= threshold)
    result.threshold = threshold
    result.mask = mask
    idx = np.flatnonzero(mask)
    return Mask3D(idx, [grid.key(i) for i in idx], grid.centers()[idx])


def render_relevance(grid: SparseVoxelGrid, result: QueryResult, camera: Camera,
                     samples_per_interval: int = 1, threads: int = 1, row_block: int = 32) -> ImagePlane:
    """Composite normalized scores exactly as color is composited; unfused voxels contribute 0."""
    h, w = camera.height, camera.width
    if len(grid) == 0:
        return ImagePlane(np.zeros((h, w)), np.ones((h, w), dtype=bool))
    if result.normalized.shape != (len(grid),):
        raise DomainError("query result does not belong to this grid")
    scores = np.nan_to_num(result.normalized, nan=0.0)
    _, values, _, _ = composite(grid, camera, scores[:, None], samples_per_interval,
                                threads, row_block, with_geometry=False)
    return ImagePlane(values.reshape(h, w), np.ones((h, w), dtype=bool))


def mask2d(relevance_map: ImagePlane, threshold: float) -> np.ndarray:
    """Min-max normalize a rendered relevance map over valid pixels and threshold it."""
    values = np.where(relevance_map.valid, relevance_map.scalar().astype(np.float64), np.nan)
    norm = min_max(values)
    with np.errstate(invalid="ignore"):
        return relevance_map.valid & (np.nan_to_num(norm, nan=-1.0) >= threshold)


def region_mask(region, width: int, height: int) -> np.ndarray:
    """Boolean (H, W) region from a mask array or a pixel box (x0, y0, x1, y1), inclusive-exclusive."""
    arr = np.asarray(region)
    if arr.shape == (height, width):
        return arr.astype(bool)
    if arr.shape == (4,):
        x0, y0, x1, y1 = (int(c) for c in arr)
        out = np.zeros((height, width), dtype=bool)
        out[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
        return out
    raise DomainError(f"region must be a {height}x{width} mask or a 4-element box")


def localization_hit(relevance_map: ImagePlane, region) -> bool:
    """True when the most relevant valid pixel lies inside `region`."""
    if not np.any(relevance_map.valid):
        return False
    gt = region_mask(region, relevance_map.width, relevance_map.height)
    values = np.where(relevance_map.valid, relevance_map.scalar(), -np.inf)
    y, x = np.unravel_index(int(np.argmax(values)), values.shape)
    return bool(gt[y, x])


def transfer_pointcloud(grid: SparseVoxelGrid, points: np.ndarray,
                        class_embeddings: Sequence[QueryEmbedding], k: int = 8,
                        cell_voxels: float = 2.0, chunk: int = 2048, threads: int = 1) -> TransferResult:
    """Label points from their K nearest fused voxels.

    Each candidate votes softmax(cos(F, e_c)) over classes with weight
    exp(-d^2 / 2); the point's scores are the weight-normalized sum.
    """
    if not class_embeddings:
        raise DomainError("no class embeddings given")
    if k < 1:
        raise DomainError("k must be >= 1")
    dim = class_embeddings[0].vector.size
    fused = _check_fused(grid, dim)
    queries = np.stack([e.unit for e in class_embeddings])
    if queries.shape[1] != dim:
        raise DomainError("class embeddings disagree on dimension")
    fused_idx = np.flatnonzero(fused)
    probs = softmax(_cosine(grid.features[fused_idx], queries), axis=1)
    index = SpatialHash(grid.centers()[fused_idx], cell_voxels * grid.finest_voxel_size())
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(points), len(class_embeddings)))

    def work(span):
        lo, hi = span
        for p in range(lo, hi):
            ids, d2 = index.query(points[p], k)
            # shifting by the nearest distance leaves the normalized weights unchanged
            w = np.exp(-0.5 * (d2 - d2[0]))
            out[p] = (w[:, None] * probs[ids]).sum(axis=0) / w.sum()

    spans = [(s, min(s + chunk, len(points))) for s in range(0, len(points), chunk)]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, spans))
    else:
        for span in spans:
            work(span)
    return TransferResult(out, np.argmax(out, axis=1))


# -- metrics ---------------------------------------------------------------

def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DomainError(f"mask universes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def metrics(pred: np.ndarray, gt: np.ndarray) -> Dict[str, float]:
    """IoU, Acc@25 hit and recall of one predicted mask."""
    value = iou(pred, gt)
    gt_count = np.count_nonzero(gt)
    recall = np.count_nonzero(np.asarray(pred, dtype=bool) & np.asarray(gt, dtype=bool)) / gt_count \
        if gt_count else 1.0
    return {"iou": value, "acc25_hit": value >= 0.25, "recall": recall}


def aggregate(rows: Sequence[Dict[str, float]]) -> Dict[str, Optional[float]]:
    """Mean IoU, Acc@25, mean recall and localization accuracy over queries."""
    if not rows:
        raise EmptyDomainError("no query results to aggregate")
    loc = [r["loc_hit"] for r in rows if r.get("loc_hit") is not None]
    return {
        "miou": float(np.mean([r["iou"] for r in rows])),
        "acc25": float(np.mean([bool(r["acc25_hit"]) for r in rows])),
        "macc": float(np.mean([r["recall"] for r in rows])),
        "loc_acc": float(np.mean(loc)) if loc else None,
    }


def per_class_iou(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """IoU per class; NaN for classes absent from both labelings."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DomainError("label arrays differ in length")
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        p, g = pred_labels == c, gt_labels == c
        if np.any(p | g):
            out[c] = iou(p, g)
    return out


def mean_class_accuracy(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int) -> float:
    """Mean recall over classes present in the ground truth."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DomainError("label arrays differ in length")
    recalls = [np.mean(pred_labels[gt_labels == c] == c) for c in range(num_classes) if np.any(gt_labels == c)]
    if not recalls:
        raise EmptyDomainError("ground truth has no labelled point")
    return float(np.mean(recalls))


# -- editing and visualization --------------------------------------------

def solid_color_sh(rgb: Sequence[float], sh_degree: int) -> np.ndarray:
    """View-independent SH coefficients (K, 3) for a solid color."""
    sh = np.zeros((num_coeffs(sh_degree), 3))
    sh[0] = rgb_to_sh(rgb)
    return sh


def edit_voxels(grid: SparseVoxelGrid, keys: Sequence[VoxelKey], sh: np.ndarray) -> SparseVoxelGrid:
    """Replace the color coefficients of the voxels in `keys` (in place)."""
    sh = np.asarray(sh, dtype=np.float32)
    if sh.shape != grid.sh.shape[1:]:
        raise DomainError(f"SH coefficients must have shape {grid.sh.shape[1:]}, got {sh.shape}")
    idx = np.array([grid.index_of(key) for key in keys], dtype=np.int64)
    if idx.size:
        grid.sh[idx] = sh
    logger.info(f"Recolored {idx.size} voxels")
    return grid


def feature_pca_colors(grid: SparseVoxelGrid) -> np.ndarray:
    """RGB from the first three principal components of fused features; unfused voxels are gray."""
    colors = np.full((len(grid), 3), 0.5)
    fused = grid.fused_mask()
    if np.count_nonzero(fused) < 2 or grid.feature_dim == 0:
        return colors
    f = grid.features[fused].astype(np.float64)
    f = f - f.mean(axis=0)
    _, _, vt = np.linalg.svd(f, full_matrices=False)
    comps = np.zeros((3, f.shape[1]))
    comps[:min(3, vt.shape[0])] = vt[:3]
    # deterministic sign: largest loading positive
    signs = np.sign(comps[np.arange(3), np.argmax(np.abs(comps), axis=1)])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    proj = f @ comps.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    colors[fused] = np.where(hi - lo > 0, (proj - lo) / span, 0.5)
    return colors
