"""Scene directories: a JSON manifest plus per-view binary maps."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator

from voxfuse.camera import Camera, ImagePlane
from voxfuse.errors import DataError, DomainError
from voxfuse.feat2d import CropFeature
from voxfuse.formats import (read_crop_manifest, read_embedding_manifest, read_image, read_ply_points,
                             write_crop_manifest, write_embedding_manifest, write_image, write_ply_points)
from voxfuse.grid import Bounds
from voxfuse.query import QueryEmbedding

logger = logging.getLogger(__name__)

MANIFEST_NAME = "scene.json"
MANIFEST_VERSION = 1


class Primitive(BaseModel):
    """Analytic solid: sphere (radius), box (half_size, yaw about z) or a
    half-space whose boundary plane passes through `center` with `normal`."""
    kind: Literal["sphere", "box", "plane"]
    center: Tuple[float, float, float]
    radius: float = Field(default=0.0, ge=0.0)
    half_size: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_deg: float = 0.0
    normal: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    class_id: int = Field(..., ge=0)

    @field_validator("normal")
    @classmethod
    def normal_not_zero(cls, v):
        if np.linalg.norm(v) == 0:
            raise ValueError("plane normal must be non-zero")
        return v


class ViewEntry(BaseModel):
    name: str
    camera: Camera
    depth: str
    feature: Optional[str] = None
    crops: Optional[str] = None
    labels: Optional[str] = None


class SceneManifest(BaseModel):
    version: int = MANIFEST_VERSION
    bounds_min: Tuple[float, float, float]
    bounds_max: Tuple[float, float, float]
    level: int = Field(default=6, ge=1, le=8)
    views: List[ViewEntry] = Field(default_factory=list)
    embeddings: Optional[str] = "embeddings.txt"
    classes: List[str] = Field(default_factory=list)
    primitives: List[Primitive] = Field(default_factory=list)
    points: Optional[str] = None


@dataclass
class Scene:
    """Fully loaded scene inputs. `labels` are optional per-view class-id
    maps (invalid where no class is seen)."""
    bounds: Bounds
    cameras: List[Camera]
    depths: List[ImagePlane]
    features: List[Optional[ImagePlane]] = field(default_factory=list)
    crops: List[Optional[List[CropFeature]]] = field(default_factory=list)
    embeddings: List[QueryEmbedding] = field(default_factory=list)
    labels: List[Optional[ImagePlane]] = field(default_factory=list)
    classes: List[str] = field(default_factory=list)
    primitives: List[Primitive] = field(default_factory=list)
    points: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None
    level: int = 6
    names: List[str] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        n = len(self.cameras)
        for attr in ("features", "crops", "labels"):
            if not getattr(self, attr):
                setattr(self, attr, [None] * n)
        if not self.names:
            self.names = [f"view_{i:03d}" for i in range(n)]

    @property
    def feature_dim(self) -> Optional[int]:
        for f in self.features:
            if f is not None:
                return f.channels
        for crops in self.crops:
            if crops:
                return crops[0].feature.shape[2]
        return None


def _manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def read_manifest(path: Union[str, Path]) -> SceneManifest:
    path = _manifest_path(path)
    if not path.is_file():
        raise DataError(f"{path}: scene manifest not found")
    try:
        return SceneManifest.model_validate_json(path.read_text())
    except ValidationError as e:
        raise DataError(f"{path}: invalid scene manifest: {e}") from e


def load_scene(path: Union[str, Path]) -> Scene:
    """Load and validate a scene directory (or its manifest file)."""
    manifest_path = _manifest_path(path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    try:
        bounds = Bounds(manifest.bounds_min, manifest.bounds_max)
    except DomainError as e:
        raise DataError(f"{manifest_path}: bounds: {e}") from e
    scene = Scene(bounds=bounds, cameras=[v.camera for v in manifest.views], depths=[],
                  classes=list(manifest.classes), primitives=list(manifest.primitives),
                  level=manifest.level, names=[v.name for v in manifest.views], root=root)
    dim_owner = None
    for i, view in enumerate(manifest.views):
        cam = view.camera
        depth = read_image(root / view.depth)
        _check_size(depth, cam, root / view.depth)
        scene.depths.append(depth)
        if view.feature:
            feat = read_image(root / view.feature)
            _check_size(feat, cam, root / view.feature)
            scene.features[i] = feat
        if view.crops:
            scene.crops[i] = read_crop_manifest(root / view.crops)
        if view.labels:
            lab = read_image(root / view.labels)
            _check_size(lab, cam, root / view.labels)
            scene.labels[i] = lab
        dims = {f.channels for f in [scene.features[i]] if f is not None}
        dims |= {c.feature.shape[2] for c in scene.crops[i] or []}
        if len(dims) > 1:
            raise DataError(f"{manifest_path}: view '{view.name}' mixes feature dimensions {sorted(dims)}")
        if dims:
            dim = dims.pop()
            if dim_owner is None:
                dim_owner = (view.name, dim)
            elif dim != dim_owner[1]:
                raise DataError(f"{manifest_path}: view '{view.name}' has feature dimension {dim}, "
                                f"view '{dim_owner[0]}' has {dim_owner[1]}")
    if manifest.embeddings and (root / manifest.embeddings).is_file():
        scene.embeddings = read_embedding_manifest(root / manifest.embeddings)
        if dim_owner and scene.embeddings and scene.embeddings[0].vector.size != dim_owner[1]:
            raise DataError(f"{manifest_path}: embeddings have dimension {scene.embeddings[0].vector.size}, "
                            f"features have {dim_owner[1]}")
    if manifest.points:
        scene.points, scene.point_labels = read_ply_points(root / manifest.points)
    logger.info(f"Loaded scene {root} with {len(scene.cameras)} views")
    return scene


def _check_size(plane: ImagePlane, camera: Camera, path: Path) -> None:
    if plane.width != camera.width or plane.height != camera.height:
        raise DataError(f"{path}: image is {plane.width}x{plane.height}, camera is "
                        f"{camera.width}x{camera.height}")


def save_scene(scene: Scene, directory: Union[str, Path]) -> SceneManifest:
    """Write every scene input under `directory` and the manifest last."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for i, cam in enumerate(scene.cameras):
        name = scene.names[i]
        entry = ViewEntry(name=name, camera=cam, depth=f"{name}_depth.limg")
        write_image(scene.depths[i], directory / entry.depth)
        if scene.features[i] is not None:
            entry.feature = f"{name}_feature.limg"
            write_image(scene.features[i], directory / entry.feature)
        if scene.crops[i]:
            entry.crops = f"{name}_crops.txt"
            write_crop_manifest([(c, f"{name}_crop_{k:03d}.limg") for k, c in enumerate(scene.crops[i])],
                                directory / entry.crops)
        if scene.labels[i] is not None:
            entry.labels = f"{name}_labels.limg"
            write_image(scene.labels[i], directory / entry.labels)
        views.append(entry)
    manifest = SceneManifest(bounds_min=scene.bounds.minimum, bounds_max=scene.bounds.maximum,
                             level=scene.level, views=views, classes=scene.classes,
                             primitives=scene.primitives, embeddings=None)
    if scene.embeddings:
        manifest.embeddings = write_embedding_manifest(scene.embeddings, directory).name
    if scene.points is not None:
        manifest.points = "points.ply"
        write_ply_points(scene.points, directory / manifest.points, labels=scene.point_labels)
    (directory / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2))
    scene.root = directory
    logger.info(f"Saved scene with {len(views)} views to {directory}")
    return manifest


def update_view_features(directory: Union[str, Path], features: List[ImagePlane]) -> SceneManifest:
    """Write stitched per-view feature maps and point the manifest at them."""
    path = _manifest_path(directory)
    manifest = read_manifest(path)
    if len(features) != len(manifest.views):
        raise DataError(f"{path}: {len(features)} feature maps for {len(manifest.views)} views")
    for view, feat in zip(manifest.views, features):
        view.feature = f"{view.name}_feature.limg"
        write_image(feat, path.parent / view.feature)
    path.write_text(manifest.model_dump_json(indent=2))
    return manifest
