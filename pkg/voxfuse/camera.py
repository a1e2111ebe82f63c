"""Pinhole cameras and per-pixel image planes.

Conventions: OpenCV camera frame (+x right, +y down, +z forward), pixel
(u, v) sampled through its center (u + 0.5, v + 0.5), depth maps store the
range along the pixel ray.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from voxfuse.errors import DomainError

RIGID_TOLERANCE = 1e-9


def check_rigid(pose: np.ndarray, tol: float = RIGID_TOLERANCE) -> None:
    """Raise DomainError unless `pose` is a 4x4 rigid transform with det(R) = +1."""
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise DomainError(f"pose must be 4x4, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise DomainError("pose contains non-finite values")
    if np.max(np.abs(pose[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > tol:
        raise DomainError("pose last row must be [0, 0, 0, 1]")
    rot = pose[:3, :3]
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > tol:
        raise DomainError("pose rotation is not orthonormal")
    det = np.linalg.det(rot)
    if abs(det - 1.0) > tol:
        raise DomainError(f"pose rotation has determinant {det:.6f}, expected +1")


class Camera(BaseModel):
    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)
    world_from_camera: List[List[float]]

    @field_validator("world_from_camera")
    @classmethod
    def pose_is_rigid(cls, v):
        check_rigid(np.asarray(v, dtype=np.float64))
        return v

    @classmethod
    def from_pose(cls, pose: np.ndarray, fx: float, fy: float, cx: float, cy: float,
                  width: int, height: int) -> "Camera":
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                   world_from_camera=np.asarray(pose, dtype=np.float64).tolist())

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float], width: int, height: int,
                fov_deg: float = 60.0, up: Sequence[float] = (0.0, 0.0, 1.0)) -> "Camera":
        """Camera at `eye` whose optical axis passes through `target`."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            # looking along `up`; any perpendicular works
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        pose = np.eye(4)
        pose[:3, 0] = right
        pose[:3, 1] = down
        pose[:3, 2] = forward
        pose[:3, 3] = eye
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls.from_pose(pose, focal, focal, width / 2.0, height / 2.0, width, height)

    @property
    def pose(self) -> np.ndarray:
        return np.asarray(self.world_from_camera, dtype=np.float64)

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    @property
    def forward(self) -> np.ndarray:
        return self.pose[:3, 2].copy()

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) to camera-frame coordinates, elementwise so results
        do not depend on how points are batched."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        r = self.rotation
        t = self.center
        dx = p[:, 0] - t[0]
        dy = p[:, 1] - t[1]
        dz = p[:, 2] - t[2]
        out = np.empty_like(p)
        for i in range(3):
            out[:, i] = dx * r[0, i] + dy * r[1, i] + dz * r[2, i]
        return out

    def project(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Continuous pixel coordinates (u, v) and camera-frame z of world points."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def ranges(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance from the camera center."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        t = self.center
        dx = p[:, 0] - t[0]
        dy = p[:, 1] - t[1]
        dz = p[:, 2] - t[2]
        return np.sqrt(dx * dx + dy * dy + dz * dz)

    def pixel_directions(self, row_start: int = 0, row_stop: Optional[int] = None) -> np.ndarray:
        """Unit world-space ray directions through pixel centers of rows
        [row_start, row_stop), row-major, shape (rows * width, 3)."""
        row_stop = self.height if row_stop is None else row_stop
        vs, us = np.meshgrid(np.arange(row_start, row_stop, dtype=np.float64),
                             np.arange(self.width, dtype=np.float64), indexing="ij")
        xc = (us.ravel() + 0.5 - self.cx) / self.fx
        yc = (vs.ravel() + 0.5 - self.cy) / self.fy
        norm = np.sqrt(xc * xc + yc * yc + 1.0)
        r = self.rotation
        dirs = np.empty((xc.size, 3))
        for i in range(3):
            dirs[:, i] = (r[i, 0] * xc + r[i, 1] * yc + r[i, 2]) / norm
        return dirs


@dataclass
class ImagePlane:
    """Row-major per-pixel values of shape (H, W, C) with a validity mask.

    Invalid pixels hold NaN and are excluded from every reduction.
    """
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise DomainError(f"image values must be (H, W, C), got shape {values.shape}")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != values.shape[:2]:
            raise DomainError(f"validity mask shape {valid.shape} does not match image {values.shape[:2]}")
        values = values.copy()
        values[~valid] = np.nan
        self.values = values
        self.valid = valid

    @classmethod
    def empty(cls, width: int, height: int, channels: int = 1) -> "ImagePlane":
        return cls(np.full((height, width, channels), np.nan, dtype=np.float32),
                   np.zeros((height, width), dtype=bool))

    @classmethod
    def from_array(cls, values: np.ndarray, valid: Optional[np.ndarray] = None) -> "ImagePlane":
        """Wrap an array; by default a pixel is valid when all its channels are finite."""
        values = np.asarray(values)
        if valid is None:
            finite = np.isfinite(values)
            valid = finite if values.ndim == 2 else np.all(finite, axis=-1)
        return cls(values, valid)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def scalar(self) -> np.ndarray:
        """(H, W) view of a single-channel plane."""
        if self.channels != 1:
            raise DomainError(f"expected a single-channel image, got {self.channels} channels")
        return self.values[:, :, 0]

    def same_size(self, other: "ImagePlane") -> bool:
        return self.width == other.width and self.height == other.height


# Named roles of ImagePlane
DepthMap = ImagePlane
AlphaMap = ImagePlane
ConfidenceMap = ImagePlane
ColorMap = ImagePlane
NormalMap = ImagePlane
FeatureMap = ImagePlane
