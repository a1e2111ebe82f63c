"""Exact K-nearest-neighbour search over a uniform spatial hash."""
from collections import defaultdict
from functools import lru_cache
from typing import Tuple

import numpy as np

from voxfuse.errors import DomainError

_MAX_CELL_OFFSET = 2 ** 40


def squared_distances(point: np.ndarray, points: np.ndarray) -> np.ndarray:
    dx = points[:, 0] - point[0]
    dy = points[:, 1] - point[1]
    dz = points[:, 2] - point[2]
    return dx * dx + dy * dy + dz * dz


@lru_cache(maxsize=64)
def _shell(radius: int) -> np.ndarray:
    """Integer cell offsets at Chebyshev distance exactly `radius`."""
    r = np.arange(-radius, radius + 1)
    cube = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    return cube[np.max(np.abs(cube), axis=1) == radius]


def _shell_size(radius: int) -> int:
    return 1 if radius == 0 else (2 * radius + 1) ** 3 - (2 * radius - 1) ** 3


class SpatialHash:
    """Buckets points by cell; queries expand cell rings until the K-th best
    distance is bounded by the searched radius."""

    def __init__(self, points: np.ndarray, cell: float):
        if not cell > 0:
            raise DomainError("hash cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        self.origin = self.points.min(axis=0) if len(self.points) else np.zeros(3)
        cells = self._cell_of(self.points)
        self.buckets = defaultdict(list)
        for i, c in enumerate(map(tuple, cells.tolist())):
            self.buckets[c].append(i)
        self.buckets = {c: np.asarray(ids, dtype=np.int64) for c, ids in self.buckets.items()}
        self.cell_min = cells.min(axis=0) if len(cells) else np.zeros(3, dtype=np.int64)
        self.cell_max = cells.max(axis=0) if len(cells) else np.zeros(3, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)

    def _cell_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor((points - self.origin) / self.cell).astype(np.int64)

    def query(self, point, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Indices and squared distances of the min(k, N) nearest points,
        ordered by (distance, index)."""
        if k < 1:
            raise DomainError("k must be >= 1")
        point = np.asarray(point, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(point)):
            raise DomainError("query point must be finite")
        n = len(self.points)
        if n == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        offset = (point - self.origin) / self.cell
        if np.any(np.abs(offset) > _MAX_CELL_OFFSET):
            return self._brute_force(point, k)
        center = np.floor(offset).astype(np.int64)
        reach = int(np.max(np.maximum(np.abs(self.cell_min - center), np.abs(self.cell_max - center))))
        # shells closer than the occupied cell box are empty
        radius = int(np.max(np.maximum(np.maximum(self.cell_min - center, center - self.cell_max), 0)))
        found = []
        count = 0
        while True:
            if _shell_size(radius) > len(self.buckets):
                return self._brute_force(point, k)
            for off in _shell(radius):
                ids = self.buckets.get(tuple((center + off).tolist()))
                if ids is not None:
                    found.append(ids)
                    count += ids.size
            if count >= min(k, n):
                ids = np.concatenate(found)
                d2 = squared_distances(point, self.points[ids])
                order = np.lexsort((ids, d2))
                kth = d2[order[min(k, ids.size) - 1]]
                bound = radius * self.cell
                if count == n or radius >= reach or kth <= bound * bound:
                    take = order[:k]
                    return ids[take], d2[take]
            radius += 1

    def _brute_force(self, point: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        d2 = squared_distances(point, self.points)
        ids = np.arange(len(self.points), dtype=np.int64)
        take = np.lexsort((ids, d2))[:k]
        return ids[take], d2[take]
