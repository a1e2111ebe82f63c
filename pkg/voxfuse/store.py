import os
import logging
import threading
from pathlib import Path
from typing import List, Optional

from voxfuse.errors import DataError
from voxfuse.formats import read_embedding_manifest, read_grid, write_grid
from voxfuse.grid import Bounds, SparseVoxelGrid
from voxfuse.query import QueryEmbedding

logger = logging.getLogger(__name__)


class GridStore:
    """Holds the served grid and its query embeddings.

    Reads may run concurrently; edits take the lock.
    """

    def __init__(self):
        self.grid: Optional[SparseVoxelGrid] = None
        self.embeddings: List[QueryEmbedding] = []
        self.grid_path: Optional[Path] = None
        self.lock = threading.RLock()

    @property
    def loaded(self) -> bool:
        return self.grid is not None and len(self.grid) > 0

    def connect(self):
        """Load grid and embeddings from VOXFUSE_GRID / VOXFUSE_EMBEDDINGS, or fall back to an empty store"""
        grid_path = os.getenv("VOXFUSE_GRID")
        embeddings_path = os.getenv("VOXFUSE_EMBEDDINGS")

        if not grid_path:
            logger.info("No VOXFUSE_GRID provided; serving an empty grid")
            self.grid = SparseVoxelGrid(Bounds((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))
            self.embeddings = []
            return

        try:
            self.grid_path = Path(grid_path)
            self.grid = read_grid(self.grid_path)
            logger.info(f"Loaded grid {grid_path} with {len(self.grid)} voxels")
            if embeddings_path:
                self.embeddings = read_embedding_manifest(embeddings_path)
                logger.info(f"Loaded {len(self.embeddings)} query embeddings")
        except DataError as e:
            logger.error(f"Failed to load grid store: {e}")
            raise

    def close(self):
        self.grid = None
        self.embeddings = []
        logger.info("Grid store closed")

    def load(self, grid: SparseVoxelGrid, embeddings: List[QueryEmbedding]):
        """Serve an in-memory grid."""
        with self.lock:
            self.grid = grid
            self.embeddings = list(embeddings)

    def embedding(self, label: str) -> Optional[QueryEmbedding]:
        for e in self.embeddings:
            if e.label == label:
                return e
        return None

    def save(self, path: Optional[Path] = None) -> Path:
        target = Path(path) if path else self.grid_path
        if target is None:
            raise DataError("no grid path to save to")
        with self.lock:
            write_grid(self.grid, target)
        return target


grid_store = GridStore()
