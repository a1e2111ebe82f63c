"""Triangle meshes extracted from TSDF fields."""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from skimage import measure

from voxfuse.errors import DomainError
from voxfuse.grid import CORNER_OFFSETS, trilinear_gradient_weights

logger = logging.getLogger(__name__)


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise DomainError("triangle index out of range")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.vertices.shape:
                raise DomainError("vertex normals do not match vertices")

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized geometric normals (twice the triangle area)."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def boundary_edge_count(mesh: TriangleMesh) -> int:
    """Number of edges used by exactly one triangle."""
    if mesh.is_empty:
        return 0
    t = mesh.triangles
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return int(np.count_nonzero(counts == 1))


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    v = vertices[triangles]
    face = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, triangles[:, k], face)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def extract_mesh(tsdf) -> TriangleMesh:
    """Marching cubes over cells whose eight corners are all observed.

    Faces are wound so their normal points along +grad(phi).
    """
    observed = tsdf.weight > 0
    edge = tsdf.voxel_size
    filled = np.where(observed, tsdf.phi, tsdf.trunc)
    cells = observed[:-1, :-1, :-1].copy()
    for off in CORNER_OFFSETS[1:]:
        i, j, k = off
        cells &= observed[i:i + cells.shape[0], j:j + cells.shape[1], k:k + cells.shape[2]]
    if not np.any(cells):
        logger.warning("TSDF has no fully observed cell; mesh is empty")
        return TriangleMesh()
    corner_min = np.full(observed.shape, np.inf)
    corner_max = np.full(observed.shape, -np.inf)
    corner_min[observed] = filled[observed]
    corner_max[observed] = filled[observed]
    if not (corner_min.min() < 0.0 < corner_max.max()):
        logger.warning("TSDF has no zero crossing; mesh is empty")
        return TriangleMesh()

    verts, faces, _, _ = measure.marching_cubes(filled, level=0.0, allow_degenerate=False)
    if faces.shape[0] == 0:
        return TriangleMesh()
    faces = faces.astype(np.int64)
    verts = verts.astype(np.float64)

    centroid = verts[faces].mean(axis=1)
    top = np.array(cells.shape) - 1
    cell = np.clip(np.floor(centroid).astype(np.int64), 0, top)
    keep = cells[cell[:, 0], cell[:, 1], cell[:, 2]]
    faces, centroid, cell = faces[keep], centroid[keep], cell[keep]

    corner_idx = cell[:, None, :] + CORNER_OFFSETS[None]
    corner_phi = filled[corner_idx[..., 0], corner_idx[..., 1], corner_idx[..., 2]]
    local = np.clip(centroid - cell, 0.0, 1.0)
    grad = np.einsum("mjk,mj->mk", trilinear_gradient_weights(local), corner_phi)
    tri = verts[faces]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.sum(normal * grad, axis=1) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    area_ok = np.linalg.norm(normal, axis=1) > 1e-12
    faces = faces[area_ok]
    if faces.shape[0] == 0:
        return TriangleMesh()

    used, inverse = np.unique(faces.ravel(), return_inverse=True)
    faces = inverse.reshape(-1, 3)
    world = tsdf.bounds.min_array + verts[used] * edge
    mesh = TriangleMesh(world, faces, vertex_normals(world, faces))
    logger.info(f"Extracted mesh with {len(mesh.vertices)} vertices and {len(mesh.triangles)} triangles")
    return mesh
