"""Hierarchical sparse voxel storage.

Voxels are addressed by (level, Morton code). Corner j of a voxel sits at
offsets (j & 1, (j >> 1) & 1, (j >> 2) & 1) along (x, y, z), the same bit
order as the Morton interleave.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from voxfuse.errors import DomainError
from voxfuse.sh import eval_sh, num_coeffs, rgb_to_sh

logger = logging.getLogger(__name__)

MAX_LEVEL = 21

CORNER_OFFSETS = np.array([[j & 1, (j >> 1) & 1, (j >> 2) & 1] for j in range(8)], dtype=np.int64)

_U = np.uint64


class VoxelKey(NamedTuple):
    level: int
    code: int


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & _U(0x1FFFFF)
    v = (v | (v << _U(32))) & _U(0x1F00000000FFFF)
    v = (v | (v << _U(16))) & _U(0x1F0000FF0000FF)
    v = (v | (v << _U(8))) & _U(0x100F00F00F00F00F)
    v = (v | (v << _U(4))) & _U(0x10C30C30C30C30C3)
    v = (v | (v << _U(2))) & _U(0x1249249249249249)
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64) & _U(0x1249249249249249)
    v = (v | (v >> _U(2))) & _U(0x10C30C30C30C30C3)
    v = (v | (v >> _U(4))) & _U(0x100F00F00F00F00F)
    v = (v | (v >> _U(8))) & _U(0x1F0000FF0000FF)
    v = (v | (v >> _U(16))) & _U(0x1F00000000FFFF)
    v = (v | (v >> _U(32))) & _U(0x1FFFFF)
    return v


def _check_level(level: int) -> None:
    if not 0 <= level <= MAX_LEVEL:
        raise DomainError(f"level must be in [0, {MAX_LEVEL}], got {level}")


def morton_encode_array(ijk: np.ndarray, level: int) -> np.ndarray:
    """Interleave (N, 3) cell coordinates into uint64 codes, x in the lowest bit."""
    _check_level(level)
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    if ijk.size and (ijk.min() < 0 or ijk.max() >= (1 << level)):
        raise DomainError(f"cell coordinates must lie in [0, {1 << level}) at level {level}")
    return (_spread_bits(ijk[:, 0])
            | (_spread_bits(ijk[:, 1]) << _U(1))
            | (_spread_bits(ijk[:, 2]) << _U(2)))


def morton_decode_array(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    return np.stack([_compact_bits(codes), _compact_bits(codes >> _U(1)),
                     _compact_bits(codes >> _U(2))], axis=-1).astype(np.int64)


def morton_encode(ix: int, iy: int, iz: int, level: int) -> VoxelKey:
    _check_level(level)
    side = 1 << level
    for name, c in (("ix", ix), ("iy", iy), ("iz", iz)):
        if not 0 <= int(c) < side:
            raise DomainError(f"{name}={c} outside [0, {side}) at level {level}")
    code = morton_encode_array(np.array([[ix, iy, iz]]), level)[0]
    return VoxelKey(level, int(code))


def morton_decode(key: VoxelKey) -> Tuple[int, int, int]:
    _check_level(key.level)
    if not 0 <= key.code < 8 ** key.level:
        raise DomainError(f"code {key.code} out of range for level {key.level}")
    ijk = morton_decode_array(np.array([key.code], dtype=np.uint64))[0]
    return int(ijk[0]), int(ijk[1]), int(ijk[2])


def parent_key(key: VoxelKey, level: int) -> VoxelKey:
    """Ancestor of `key` at the coarser `level`."""
    if level > key.level:
        raise DomainError(f"level {level} is finer than key level {key.level}")
    return VoxelKey(level, key.code >> (3 * (key.level - level)))


def is_ancestor(a: VoxelKey, b: VoxelKey) -> bool:
    """True if `a` is a strict octree ancestor of `b`."""
    return a.level < b.level and parent_key(b, a.level).code == a.code


@dataclass(frozen=True)
class Bounds:
    """Axis-aligned cubic scene box."""
    minimum: Tuple[float, float, float]
    maximum: Tuple[float, float, float]

    def __post_init__(self):
        mn = np.asarray(self.minimum, dtype=np.float64)
        mx = np.asarray(self.maximum, dtype=np.float64)
        if mn.shape != (3,) or mx.shape != (3,) or not np.all(np.isfinite(mn)) or not np.all(np.isfinite(mx)):
            raise DomainError("bounds must be two finite 3-vectors")
        ext = mx - mn
        if np.any(ext <= 0):
            raise DomainError("bounds maximum must exceed minimum on every axis")
        if np.max(np.abs(ext - ext[0])) > 1e-9 * ext[0]:
            raise DomainError(f"bounds must be a cube, got extents {ext.tolist()}")

    @classmethod
    def cube(cls, center: Sequence[float], extent: float) -> "Bounds":
        c = np.asarray(center, dtype=np.float64)
        return cls(tuple((c - extent / 2.0).tolist()), tuple((c + extent / 2.0).tolist()))

    @property
    def min_array(self) -> np.ndarray:
        return np.asarray(self.minimum, dtype=np.float64)

    @property
    def max_array(self) -> np.ndarray:
        return np.asarray(self.maximum, dtype=np.float64)

    @property
    def extent(self) -> float:
        return float(self.maximum[0] - self.minimum[0])

    def voxel_size(self, level) -> np.ndarray:
        return np.ldexp(self.extent, -np.asarray(level, dtype=np.int64))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.min_array) & (p <= self.max_array), axis=1)


@dataclass
class Voxel:
    key: VoxelKey
    center: np.ndarray
    size: float
    densities: np.ndarray
    sh: np.ndarray

    @property
    def box_min(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def box_max(self) -> np.ndarray:
        return self.center + self.size / 2.0


class SparseVoxelGrid:
    """Antichain of active voxels with per-voxel corner densities, SH colors and
    an optional fused feature channel.

    Rows are stored struct-of-arrays in insertion order; `sorted_order()`
    yields the (level, code) order used for serialization.
    """

    def __init__(self, bounds: Bounds, sh_degree: int = 0, feature_dim: int = 0):
        self.bounds = bounds
        self.sh_degree = sh_degree
        k = num_coeffs(sh_degree)
        self.levels = np.zeros(0, dtype=np.uint8)
        self.codes = np.zeros(0, dtype=np.uint64)
        self.densities = np.zeros((0, 8), dtype=np.float32)
        self.sh = np.zeros((0, k, 3), dtype=np.float32)
        self.features = np.zeros((0, feature_dim), dtype=np.float32)
        self.weight_sum = np.zeros(0, dtype=np.float32)
        self._index: Dict[Tuple[int, int], int] = {}
        self._ancestors: Set[Tuple[int, int]] = set()

    def __len__(self) -> int:
        return int(self.codes.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    # -- construction -----------------------------------------------------

    def add_voxels(self, levels: Iterable[int], codes: Iterable[int],
                   densities: Optional[np.ndarray] = None,
                   sh: Optional[np.ndarray] = None) -> np.ndarray:
        """Activate voxels; rejects any key that would break the antichain.

        Either every key is inserted or none is.
        """
        levels = np.asarray(list(levels) if not isinstance(levels, np.ndarray) else levels, dtype=np.int64)
        codes = np.asarray(list(codes) if not isinstance(codes, np.ndarray) else codes, dtype=np.uint64)
        if levels.shape != codes.shape:
            raise DomainError("levels and codes must have the same length")
        n = levels.size
        if densities is None:
            densities = np.zeros((n, 8), dtype=np.float32)
        densities = np.asarray(densities, dtype=np.float32).reshape(n, 8)
        if not np.all(np.isfinite(densities)) or np.any(densities < 0):
            raise DomainError("corner densities must be finite and non-negative")
        k = num_coeffs(self.sh_degree)
        if sh is None:
            sh = np.zeros((n, k, 3), dtype=np.float32)
        sh = np.asarray(sh, dtype=np.float32).reshape(n, k, 3)

        new_keys: Set[Tuple[int, int]] = set()
        new_ancestors: Set[Tuple[int, int]] = set()
        for lv, code in zip(levels.tolist(), codes.tolist()):
            _check_level(lv)
            if code >= 8 ** lv:
                raise DomainError(f"code {code} out of range for level {lv}")
            key = (lv, code)
            if key in self._index or key in new_keys:
                raise DomainError(f"voxel {key} is already active")
            if key in self._ancestors or key in new_ancestors:
                raise DomainError(f"voxel {key} is an ancestor of an active voxel")
            chain = [(a, code >> (3 * (lv - a))) for a in range(lv)]
            for anc in chain:
                if anc in self._index or anc in new_keys:
                    raise DomainError(f"voxel {key} has active ancestor {anc}")
            new_keys.add(key)
            new_ancestors.update(chain)

        start = len(self)
        for offset, key in enumerate(zip(levels.tolist(), codes.tolist())):
            self._index[key] = start + offset
        self._ancestors.update(new_ancestors)
        self.levels = np.concatenate([self.levels, levels.astype(np.uint8)])
        self.codes = np.concatenate([self.codes, codes])
        self.densities = np.concatenate([self.densities, densities])
        self.sh = np.concatenate([self.sh, sh])
        self.features = np.concatenate([self.features, np.zeros((n, self.feature_dim), dtype=np.float32)])
        self.weight_sum = np.concatenate([self.weight_sum, np.zeros(n, dtype=np.float32)])
        return np.arange(start, start + n)

    def insert(self, key: VoxelKey, densities: Optional[Sequence[float]] = None,
               sh: Optional[np.ndarray] = None) -> int:
        d = None if densities is None else np.asarray(densities, dtype=np.float32).reshape(1, 8)
        s = None if sh is None else np.asarray(sh, dtype=np.float32)[None]
        return int(self.add_voxels([key.level], [key.code], d, s)[0])

    @classmethod
    def from_cells(cls, bounds: Bounds, level: int, ijk: np.ndarray,
                   densities: Optional[np.ndarray] = None, sh_degree: int = 0,
                   rgb: Sequence[float] = (0.5, 0.5, 0.5)) -> "SparseVoxelGrid":
        """Grid of same-level voxels at cell coordinates `ijk` with a uniform base color."""
        grid = cls(bounds, sh_degree=sh_degree)
        codes = morton_encode_array(ijk, level)
        order = np.argsort(codes, kind="stable")
        sh = np.zeros((codes.size, num_coeffs(sh_degree), 3), dtype=np.float32)
        sh[:, 0] = rgb_to_sh(rgb)
        dens = None if densities is None else np.asarray(densities)[order]
        grid.add_voxels(np.full(codes.size, level), codes[order], dens, sh)
        return grid

    def set_features(self, features: np.ndarray, weight_sum: np.ndarray) -> None:
        features = np.asarray(features, dtype=np.float32)
        weight_sum = np.asarray(weight_sum, dtype=np.float32)
        if features.ndim != 2 or features.shape[0] != len(self) or weight_sum.shape != (len(self),):
            raise DomainError(f"feature arrays do not match {len(self)} voxels")
        self.features = features
        self.weight_sum = weight_sum

    def copy(self) -> "SparseVoxelGrid":
        other = SparseVoxelGrid(self.bounds, self.sh_degree, self.feature_dim)
        other.levels = self.levels.copy()
        other.codes = self.codes.copy()
        other.densities = self.densities.copy()
        other.sh = self.sh.copy()
        other.features = self.features.copy()
        other.weight_sum = self.weight_sum.copy()
        other._index = dict(self._index)
        other._ancestors = set(self._ancestors)
        return other

    # -- lookup -----------------------------------------------------------

    def index_of(self, key: VoxelKey) -> int:
        try:
            return self._index[(int(key[0]), int(key[1]))]
        except KeyError:
            raise DomainError(f"unknown voxel key {tuple(key)}") from None

    def key(self, i: int) -> VoxelKey:
        return VoxelKey(int(self.levels[i]), int(self.codes[i]))

    def keys(self) -> List[VoxelKey]:
        return [VoxelKey(lv, c) for lv, c in zip(self.levels.tolist(), self.codes.tolist())]

    def sorted_order(self) -> np.ndarray:
        return np.lexsort((self.codes, self.levels))

    def sizes(self) -> np.ndarray:
        return self.bounds.voxel_size(self.levels.astype(np.int64))

    def cells(self) -> np.ndarray:
        return morton_decode_array(self.codes)

    def centers(self) -> np.ndarray:
        sizes = self.sizes()
        return self.bounds.min_array + (self.cells() + 0.5) * sizes[:, None]

    def box_min(self) -> np.ndarray:
        return self.bounds.min_array + self.cells() * self.sizes()[:, None]

    def voxel(self, i: int) -> Voxel:
        size = float(self.sizes()[i])
        cell = morton_decode_array(self.codes[i:i + 1])[0]
        center = self.bounds.min_array + (cell + 0.5) * size
        return Voxel(self.key(i), center, size, self.densities[i].astype(np.float64),
                     self.sh[i].astype(np.float64))

    def fused_mask(self) -> np.ndarray:
        return self.weight_sum > 0

    def finest_voxel_size(self) -> float:
        if len(self) == 0:
            raise DomainError("grid is empty")
        return float(self.bounds.voxel_size(int(self.levels.max())))

    def colors(self, indices: np.ndarray, eye: np.ndarray) -> np.ndarray:
        """RGB of voxels `indices` seen from `eye`."""
        indices = np.asarray(indices, dtype=np.int64)
        dirs = self.centers()[indices] - np.asarray(eye, dtype=np.float64)
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
        return eval_sh(self.sh[indices], dirs)


# -- ray / box geometry ----------------------------------------------------

def slab_intervals(origins: np.ndarray, dirs: np.ndarray,
                   box_min: np.ndarray, box_max: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit parameters of rays against boxes (all arrays broadcast to (M, 3)).

    Entry is clamped to 0 for rays starting inside a box. Returns (t_in,
    t_out, hit) with hit meaning t_in <= t_out and t_out >= 0.
    """
    o, d, lo, hi = np.broadcast_arrays(np.asarray(origins, dtype=np.float64),
                                       np.asarray(dirs, dtype=np.float64),
                                       np.asarray(box_min, dtype=np.float64),
                                       np.asarray(box_max, dtype=np.float64))
    parallel = d == 0.0
    safe = np.where(parallel, 1.0, d)
    t1 = (lo - o) / safe
    t2 = (hi - o) / safe
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    inside = (o >= lo) & (o <= hi)
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    t_in = np.maximum(np.max(near, axis=-1), 0.0)
    t_out = np.min(far, axis=-1)
    hit = (t_in <= t_out) & (t_out >= 0.0)
    return t_in, t_out, hit


def front_to_back_order(grid: SparseVoxelGrid, camera) -> np.ndarray:
    """Voxel indices sorted by the entry distance of the ray from the camera
    center through each voxel center (ties: level, then Morton code)."""
    if len(grid) == 0:
        return np.zeros(0, dtype=np.int64)
    eye = camera.center
    centers = grid.centers()
    dirs = centers - eye
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
    lo = grid.box_min()
    hi = lo + grid.sizes()[:, None]
    t_in, _, _ = slab_intervals(eye[None, :], dirs, lo, hi)
    return np.lexsort((grid.codes, grid.levels, t_in))


# -- trilinear field -------------------------------------------------------

def trilinear_weights(local: np.ndarray) -> np.ndarray:
    """Basis weights (M, 8) at local unit coordinates (M, 3)."""
    u = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    w = np.ones((u.shape[0], 8))
    for j in range(8):
        for axis in range(3):
            w[:, j] *= u[:, axis] if CORNER_OFFSETS[j, axis] else 1.0 - u[:, axis]
    return w


def trilinear_gradient_weights(local: np.ndarray) -> np.ndarray:
    """Derivatives (M, 8, 3) of the basis weights w.r.t. local coordinates."""
    u = np.asarray(local, dtype=np.float64).reshape(-1, 3)
    g = np.ones((u.shape[0], 8, 3))
    for j in range(8):
        for axis in range(3):
            for other in range(3):
                bit = CORNER_OFFSETS[j, other]
                if other == axis:
                    g[:, j, axis] *= 1.0 if bit else -1.0
                else:
                    g[:, j, axis] *= u[:, other] if bit else 1.0 - u[:, other]
    return g


def trilinear_density(voxel: Voxel, p: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64)
    local = (p - voxel.box_min) / voxel.size
    tol = 1e-9
    if np.any(local < -tol) or np.any(local > 1.0 + tol):
        raise DomainError(f"point {p.tolist()} lies outside voxel {tuple(voxel.key)}")
    local = np.clip(local, 0.0, 1.0)
    return float(trilinear_weights(local[None])[0] @ np.asarray(voxel.densities, dtype=np.float64))
