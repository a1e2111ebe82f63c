"""Deterministic synthetic scenes with analytic geometry and ground truth.

Depth maps are exact ray/primitive intersections, feature maps are the
class prototype of the hit primitive plus Gaussian noise, and the union
signed distance function is available for TSDF checks.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from voxfuse.camera import Camera, ImagePlane
from voxfuse.errors import DomainError
from voxfuse.feat2d import CropFeature, crop_anchors
from voxfuse.grid import Bounds
from voxfuse.query import QueryEmbedding
from voxfuse.scene import Primitive, Scene

logger = logging.getLogger(__name__)

BACKGROUND = -1


class SynthSceneSpec(BaseModel):
    primitives: List[Primitive] = Field(default_factory=list)
    classes: List[str] = Field(default_factory=list)
    feature_dim: int = Field(default=16, ge=1)
    noise: float = Field(default=0.3, ge=0.0)
    views: int = Field(default=24, ge=1)
    width: int = Field(default=96, ge=4)
    height: int = Field(default=96, ge=4)
    fov_deg: float = Field(default=60.0, gt=0.0, lt=180.0)
    orbit_radius: float = Field(default=3.5, gt=0.0)
    elevations_deg: List[float] = Field(default_factory=lambda: [25.0, 50.0])
    target: Tuple[float, float, float] = (0.0, 0.0, 0.3)
    bounds_center: Tuple[float, float, float] = (0.0, 0.0, 0.5)
    bounds_extent: float = Field(default=3.0, gt=0.0)
    level: int = Field(default=6, ge=1, le=8)
    crops: bool = False
    crop_size: int = Field(default=32, ge=2)
    points: int = Field(default=10000, ge=0)

    @model_validator(mode="after")
    def check_classes(self):
        n_classes = max([p.class_id for p in self.primitives], default=-1) + 1
        if self.classes and len(self.classes) < n_classes:
            raise ValueError(f"{n_classes} classes referenced, {len(self.classes)} named")
        if self.feature_dim < max(len(self.classes), n_classes) + 1:
            raise ValueError("feature_dim must exceed the number of classes (one background prototype)")
        bounds = Bounds.cube(self.bounds_center, self.bounds_extent)
        for p in self.primitives:
            if not bounds.contains(np.asarray(p.center))[0]:
                raise ValueError(f"{p.kind} at {p.center} lies outside the scene bounds")
        return self

    @property
    def bounds(self) -> Bounds:
        return Bounds.cube(self.bounds_center, self.bounds_extent)

    @property
    def class_count(self) -> int:
        return max(len(self.classes), max([p.class_id for p in self.primitives], default=-1) + 1)


def five_objects(**overrides) -> SynthSceneSpec:
    """Floor with four objects, five classes."""
    prims = [
        Primitive(kind="plane", center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0), class_id=0),
        Primitive(kind="sphere", center=(-0.55, -0.5, 0.35), radius=0.35, class_id=1),
        Primitive(kind="box", center=(0.55, -0.45, 0.3), half_size=(0.3, 0.25, 0.3), yaw_deg=20.0, class_id=2),
        Primitive(kind="sphere", center=(0.5, 0.6, 0.25), radius=0.25, class_id=3),
        Primitive(kind="box", center=(-0.5, 0.55, 0.5), half_size=(0.18, 0.18, 0.5), class_id=4),
    ]
    params = dict(primitives=prims, classes=["floor", "ball", "crate", "orb", "tower"])
    params.update(overrides)
    return SynthSceneSpec(**params)


def single_sphere(radius: float = 1.0, **overrides) -> SynthSceneSpec:
    params = dict(
        primitives=[Primitive(kind="sphere", center=(0.0, 0.0, 0.0), radius=radius, class_id=0)],
        classes=["sphere"], bounds_center=(0.0, 0.0, 0.0), bounds_extent=3.0 * radius,
        target=(0.0, 0.0, 0.0), orbit_radius=3.0 * radius, views=32, level=7, elevations_deg=[-30.0, 30.0],
    )
    params.update(overrides)
    return SynthSceneSpec(**params)


# -- analytic geometry -----------------------------------------------------

def _yaw_matrix(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def primitive_sdf(prim: Primitive, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(prim.center)
    if prim.kind == "sphere":
        return np.linalg.norm(p, axis=1) - prim.radius
    if prim.kind == "box":
        local = p @ _yaw_matrix(prim.yaw_deg)
        q = np.abs(local) - np.asarray(prim.half_size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(np.max(q, axis=1), 0.0)
    n = np.asarray(prim.normal, dtype=np.float64)
    return p @ (n / np.linalg.norm(n))


def scene_sdf(primitives: Sequence[Primitive], points: np.ndarray) -> np.ndarray:
    """Signed distance to the union of primitives (+inf with none)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(points), np.inf)
    for prim in primitives:
        out = np.minimum(out, primitive_sdf(prim, points))
    return out


def nearest_primitive_labels(primitives: Sequence[Primitive], points: np.ndarray) -> np.ndarray:
    """Class id of the primitive whose surface is closest to each point."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not primitives:
        return np.full(len(points), BACKGROUND, dtype=np.int64)
    dist = np.stack([np.abs(primitive_sdf(p, points)) for p in primitives], axis=1)
    ids = np.array([p.class_id for p in primitives], dtype=np.int64)
    return ids[np.argmin(dist, axis=1)]


def _ray_primitive(prim: Primitive, origin: np.ndarray, dirs: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Nearest positive hit distance per ray, +inf on a miss."""
    o = origin - np.asarray(prim.center)
    inf = np.full(len(dirs), np.inf)
    if prim.kind == "sphere":
        b = dirs @ o
        c = o @ o - prim.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 0, t0, np.where(t1 > 0, t1, np.inf))
        return np.where(ok, t, inf)
    if prim.kind == "box":
        rot = _yaw_matrix(prim.yaw_deg)
        lo_ = o @ rot
        d = dirs @ rot
        half = np.asarray(prim.half_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - lo_) / d
            t2 = (half - lo_) / d
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        t = np.where(t_near > 0, t_near, t_far)
        return np.where((t_near <= t_far) & (t > 0), t, inf)
    n = np.asarray(prim.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -(o @ n) / denom
    t = np.where((denom != 0) & (t > 0), t, np.inf)
    hit = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    return np.where(np.isfinite(t) & bounds.contains(hit), t, inf)


def raycast_primitives(primitives: Sequence[Primitive], camera: Camera,
                       bounds: Bounds) -> Tuple[ImagePlane, np.ndarray]:
    """Exact range map and per-pixel class id (BACKGROUND on a miss)."""
    h, w = camera.height, camera.width
    dirs = camera.pixel_directions()
    eye = camera.center
    best = np.full(h * w, np.inf)
    cls = np.full(h * w, BACKGROUND, dtype=np.int64)
    for prim in primitives:
        t = _ray_primitive(prim, eye, dirs, bounds)
        closer = t < best
        best[closer] = t[closer]
        cls[closer] = prim.class_id
    valid = np.isfinite(best)
    depth = ImagePlane(np.where(valid, best, np.nan).reshape(h, w), valid.reshape(h, w))
    return depth, cls.reshape(h, w)


def orbit_cameras(spec: SynthSceneSpec) -> List[Camera]:
    """Cameras on rings at each elevation, looking at the target."""
    rings = spec.elevations_deg or [30.0]
    per_ring = [spec.views // len(rings) + (1 if i < spec.views % len(rings) else 0) for i in range(len(rings))]
    target = np.asarray(spec.target)
    cameras = []
    for ring, (elev, count) in enumerate(zip(rings, per_ring)):
        offset = np.pi / max(count, 1) * (ring % 2)
        for k in range(count):
            az = 2.0 * np.pi * k / count + offset
            el = np.radians(elev)
            eye = target + spec.orbit_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
            cameras.append(Camera.look_at(eye, target, spec.width, spec.height, spec.fov_deg))
    return cameras


def class_prototypes(class_count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal rows: one per class plus a trailing background prototype."""
    if dim < class_count + 1:
        raise DomainError("feature dimension must exceed the class count")
    q, _ = np.linalg.qr(rng.standard_normal((dim, class_count + 1)))
    return q.T


def sample_surface_points(primitives: Sequence[Primitive], bounds: Bounds, count: int,
                          rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Area-uniform samples on the visible union surface with class labels."""
    if count == 0 or not primitives:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    areas = []
    for p in primitives:
        if p.kind == "sphere":
            areas.append(4.0 * np.pi * p.radius ** 2)
        elif p.kind == "box":
            a, b, c = (2.0 * s for s in p.half_size)
            areas.append(2.0 * (a * b + b * c + a * c))
        else:
            areas.append(bounds.extent ** 2)
    probs = np.asarray(areas) / np.sum(areas)
    pts_out, lab_out = [], []
    total = 0
    while total < count:
        n = 2 * (count - total) + 16
        which = rng.choice(len(primitives), size=n, p=probs)
        pts = np.empty((n, 3))
        for i, prim in enumerate(primitives):
            sel = np.flatnonzero(which == i)
            if sel.size:
                pts[sel] = _sample_on(prim, sel.size, bounds, rng)
        labels = np.array([primitives[i].class_id for i in which], dtype=np.int64)
        union = scene_sdf(primitives, pts)
        keep = (union >= -1e-9) & bounds.contains(pts)
        pts_out.append(pts[keep])
        lab_out.append(labels[keep])
        total += int(keep.sum())
    return np.concatenate(pts_out)[:count], np.concatenate(lab_out)[:count]


def _sample_on(prim: Primitive, n: int, bounds: Bounds, rng: np.random.Generator) -> np.ndarray:
    center = np.asarray(prim.center)
    if prim.kind == "sphere":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return center + prim.radius * d
    if prim.kind == "box":
        half = np.asarray(prim.half_size)
        face_area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
        axis = rng.choice(3, size=n, p=face_area / face_area.sum())
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        sign = rng.choice([-1.0, 1.0], size=n)
        local[np.arange(n), axis] = sign * half[axis]
        return center + local @ _yaw_matrix(prim.yaw_deg).T
    normal = np.asarray(prim.normal, dtype=np.float64)
    normal /= np.linalg.norm(normal)
    u = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    half = bounds.extent / 2.0
    a = rng.uniform(-half, half, size=(n, 1))
    b = rng.uniform(-half, half, size=(n, 1))
    base = center + ((bounds.min_array + bounds.max_array) / 2.0 - center) @ (np.outer(u, u) + np.outer(v, v))
    return base + a * u + b * v


# -- scene generation ------------------------------------------------------

def synth_scene(spec: SynthSceneSpec, seed: int = 0) -> Scene:
    """Generate a scene; outputs depend only on `spec` and `seed`."""
    rng = np.random.default_rng(seed)
    bounds = spec.bounds
    n_classes = spec.class_count
    protos = class_prototypes(n_classes, spec.feature_dim, rng)
    classes = list(spec.classes) or [f"class_{c}" for c in range(n_classes)]
    cameras = orbit_cameras(spec)
    scene = Scene(bounds=bounds, cameras=cameras, depths=[], classes=classes,
                  primitives=list(spec.primitives), level=spec.level,
                  embeddings=[QueryEmbedding(classes[c], protos[c]) for c in range(n_classes)])
    noise_scale = spec.noise / np.sqrt(spec.feature_dim)
    for i, cam in enumerate(cameras):
        depth, cls = raycast_primitives(spec.primitives, cam, bounds)
        scene.depths.append(depth)
        proto_idx = np.where(cls == BACKGROUND, n_classes, cls)
        feat = protos[proto_idx] + noise_scale * rng.standard_normal((cam.height, cam.width, spec.feature_dim))
        all_valid = np.ones((cam.height, cam.width), dtype=bool)
        scene.labels[i] = ImagePlane(cls.astype(np.float64), cls != BACKGROUND)
        if spec.crops:
            scene.crops[i] = [CropFeature((x, y), feat[y:y + h, x:x + w])
                              for x, y, w, h in crop_anchors(cam.width, cam.height, spec.crop_size)]
        else:
            scene.features[i] = ImagePlane(feat, all_valid)
    scene.points, scene.point_labels = sample_surface_points(spec.primitives, bounds, spec.points, rng)
    logger.info(f"Synthesized {len(cameras)} views of {len(spec.primitives)} primitives (seed {seed})")
    return scene
