"""Binary and text formats: grids, image planes, embeddings, TSDF fields, PLY and PNG.

Every binary payload is little-endian; headers start with a 4-byte magic
and a u32 version.
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from voxfuse.camera import ImagePlane
from voxfuse.errors import DataError, DomainError
from voxfuse.feat2d import CropFeature
from voxfuse.grid import Bounds, SparseVoxelGrid, VoxelKey
from voxfuse.mesh import TriangleMesh
from voxfuse.query import QueryEmbedding
from voxfuse.sh import num_coeffs
from voxfuse.tsdf import TsdfField

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRID_MAGIC = b"LESV"
GRID_VERSION = 1
IMAGE_MAGIC = b"LIMG"
IMAGE_VERSION = 1
DTYPE_F32 = 1

GRID_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u4"), ("bounds", "<f8", (6,)),
    ("count", "<u8"), ("feature_dim", "<u4"), ("sh_degree", "<u4"),
])
IMAGE_HEADER = np.dtype([
    ("magic", "S4"), ("version", "<u4"), ("dtype", "<u4"),
    ("channels", "<u4"), ("width", "<u4"), ("height", "<u4"),
])


def _record_dtype(sh_degree: int, feature_dim: int) -> np.dtype:
    return np.dtype([
        ("level", "u1"), ("code", "<u8"), ("densities", "<f4", (8,)),
        ("sh", "<f4", (num_coeffs(sh_degree), 3)), ("features", "<f4", (feature_dim,)),
        ("weight", "<f4"),
    ])


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    return path.read_bytes()


def _header(data: bytes, dtype: np.dtype, magic: bytes, path: PathLike) -> np.void:
    if len(data) < dtype.itemsize:
        raise DataError(f"{path}: truncated header")
    header = np.frombuffer(data, dtype=dtype, count=1)[0]
    if header["magic"] != magic:
        raise DataError(f"{path}: bad magic {bytes(header['magic'])!r}, expected {magic!r}")
    return header


# -- sparse voxel grid -----------------------------------------------------

def write_grid(grid: SparseVoxelGrid, path: PathLike) -> None:
    """Serialize with records sorted by (level, code)."""
    header = np.zeros(1, dtype=GRID_HEADER)
    header["magic"] = GRID_MAGIC
    header["version"] = GRID_VERSION
    header["bounds"] = list(grid.bounds.minimum) + list(grid.bounds.maximum)
    header["count"] = len(grid)
    header["feature_dim"] = grid.feature_dim
    header["sh_degree"] = grid.sh_degree
    order = grid.sorted_order()
    records = np.zeros(len(grid), dtype=_record_dtype(grid.sh_degree, grid.feature_dim))
    records["level"] = grid.levels[order]
    records["code"] = grid.codes[order]
    records["densities"] = grid.densities[order]
    records["sh"] = grid.sh[order]
    if grid.feature_dim:
        records["features"] = grid.features[order]
    records["weight"] = grid.weight_sum[order]
    Path(path).write_bytes(header.tobytes() + records.tobytes())
    logger.info(f"Wrote {len(grid)} voxels to {path}")


def read_grid(path: PathLike) -> SparseVoxelGrid:
    data = _read_bytes(path)
    header = _header(data, GRID_HEADER, GRID_MAGIC, path)
    if header["version"] != GRID_VERSION:
        raise DataError(f"{path}: unsupported grid version {int(header['version'])}")
    sh_degree = int(header["sh_degree"])
    dim = int(header["feature_dim"])
    count = int(header["count"])
    try:
        rec_dtype = _record_dtype(sh_degree, dim)
        bounds = Bounds(tuple(header["bounds"][:3].tolist()), tuple(header["bounds"][3:].tolist()))
    except DomainError as e:
        raise DataError(f"{path}: invalid header: {e}") from e
    expected = GRID_HEADER.itemsize + count * rec_dtype.itemsize
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {count} voxels, found {len(data)}")
    records = np.frombuffer(data, dtype=rec_dtype, count=count, offset=GRID_HEADER.itemsize)
    grid = SparseVoxelGrid(bounds, sh_degree=sh_degree, feature_dim=dim)
    try:
        grid.add_voxels(records["level"].astype(np.int64), records["code"].copy(),
                        records["densities"].copy(), records["sh"].copy())
    except DomainError as e:
        raise DataError(f"{path}: invalid voxel records: {e}") from e
    grid.set_features(records["features"].reshape(count, dim).copy(), records["weight"].copy())
    return grid


# -- image planes ----------------------------------------------------------

def write_image(image: ImagePlane, path: PathLike) -> None:
    header = np.zeros(1, dtype=IMAGE_HEADER)
    header["magic"] = IMAGE_MAGIC
    header["version"] = IMAGE_VERSION
    header["dtype"] = DTYPE_F32
    header["channels"] = image.channels
    header["width"] = image.width
    header["height"] = image.height
    payload = image.values.astype("<f4").tobytes()
    bitmap = np.packbits(image.valid.ravel()).tobytes()
    Path(path).write_bytes(header.tobytes() + payload + bitmap)


def read_image(path: PathLike) -> ImagePlane:
    data = _read_bytes(path)
    header = _header(data, IMAGE_HEADER, IMAGE_MAGIC, path)
    if header["dtype"] != DTYPE_F32:
        raise DataError(f"{path}: unsupported image dtype tag {int(header['dtype'])}")
    c, w, h = int(header["channels"]), int(header["width"]), int(header["height"])
    n = w * h
    offset = IMAGE_HEADER.itemsize
    expected = offset + 4 * n * c + (n + 7) // 8
    if len(data) != expected or c == 0 or n == 0:
        raise DataError(f"{path}: expected {expected} bytes for a {w}x{h}x{c} image, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", count=n * c, offset=offset).reshape(h, w, c)
    bits = np.frombuffer(data, dtype=np.uint8, offset=offset + 4 * n * c)
    valid = np.unpackbits(bits, count=n).astype(bool).reshape(h, w)
    return ImagePlane(values.astype(np.float32), valid)


def save_png(image: ImagePlane, path: PathLike, vmin: Optional[float] = None,
             vmax: Optional[float] = None) -> None:
    """8-bit PNG: three channels as RGB in [0, 1], one channel as gray over [vmin, vmax]."""
    values = np.nan_to_num(image.values.astype(np.float64), nan=0.0)
    if image.channels == 3:
        rgb = np.clip(values, 0.0, 1.0)
    elif image.channels == 1:
        v = values[:, :, 0]
        lo = float(v[image.valid].min()) if vmin is None and np.any(image.valid) else (vmin or 0.0)
        hi = float(v[image.valid].max()) if vmax is None and np.any(image.valid) else (vmax or 1.0)
        rgb = np.repeat(np.clip((v - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)[:, :, None], 3, axis=2)
    else:
        raise DomainError(f"cannot export a {image.channels}-channel image as PNG")
    Image.fromarray((rgb * 255.0 + 0.5).astype(np.uint8)).save(path)


# -- embeddings ------------------------------------------------------------

def write_vector(vector: np.ndarray, path: PathLike) -> None:
    vector = np.asarray(vector, dtype="<f4").ravel()
    Path(path).write_bytes(np.array([vector.size], dtype="<u4").tobytes() + vector.tobytes())


def read_vector(path: PathLike) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataError(f"{path}: truncated vector header")
    dim = int(np.frombuffer(data, dtype="<u4", count=1)[0])
    if len(data) != 4 + 4 * dim:
        raise DataError(f"{path}: expected {dim} floats, found {(len(data) - 4) // 4}")
    return np.frombuffer(data, dtype="<f4", count=dim, offset=4).astype(np.float32)


def read_embedding_manifest(path: PathLike) -> List[QueryEmbedding]:
    """`label<TAB>path` lines; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    out = []
    dims = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'label<TAB>path'")
        label, ref = parts[0].strip(), parts[1].strip()
        vector = read_vector(path.parent / ref)
        try:
            out.append(QueryEmbedding(label, vector))
        except DomainError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        dims.add(vector.size)
    if len(dims) > 1:
        raise DataError(f"{path}: embeddings disagree on dimension {sorted(dims)}")
    return out


def write_embedding_manifest(embeddings: Sequence[QueryEmbedding], directory: PathLike,
                             name: str = "embeddings.txt") -> Path:
    directory = Path(directory)
    lines = []
    for i, e in enumerate(embeddings):
        ref = f"{i:02d}_{slug(e.label)}.vec"
        write_vector(e.vector, directory / ref)
        lines.append(f"{e.label}\t{ref}")
    manifest = directory / name
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label.lower()).strip("_") or "query"


# -- crops -----------------------------------------------------------------

def read_crop_manifest(path: PathLike) -> List[CropFeature]:
    """`anchor_x anchor_y width height path` lines of crop feature planes."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    crops = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 'anchor_x anchor_y width height path'")
        x, y, w, h = (int(p) for p in parts[:4])
        plane = read_image(path.parent / parts[4])
        if plane.width != w or plane.height != h:
            raise DataError(f"{path}:{lineno}: crop file is {plane.width}x{plane.height}, manifest says {w}x{h}")
        crops.append(CropFeature((x, y), plane.values))
    return crops


def write_crop_manifest(crops: Sequence[Tuple[CropFeature, str]], path: PathLike) -> None:
    path = Path(path)
    lines = []
    for crop, ref in crops:
        write_image(ImagePlane.from_array(crop.feature), path.parent / ref)
        lines.append(f"{crop.anchor[0]} {crop.anchor[1]} {crop.width} {crop.height} {ref}")
    path.write_text("\n".join(lines) + "\n")


# -- TSDF ------------------------------------------------------------------

def save_tsdf(field: TsdfField, path: PathLike) -> None:
    np.savez_compressed(path, level=field.level, trunc=field.trunc,
                        bounds=np.array(list(field.bounds.minimum) + list(field.bounds.maximum)),
                        phi=field.phi, weight=field.weight)


def load_tsdf(path: PathLike) -> TsdfField:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    try:
        with np.load(path) as data:
            bounds = Bounds(tuple(data["bounds"][:3].tolist()), tuple(data["bounds"][3:].tolist()))
            field = TsdfField(bounds, int(data["level"]), float(data["trunc"]))
            phi, weight = data["phi"], data["weight"]
    except (KeyError, ValueError, OSError) as e:
        raise DataError(f"{path}: invalid TSDF archive: {e}") from e
    if phi.shape != field.phi.shape or weight.shape != field.weight.shape:
        raise DataError(f"{path}: TSDF arrays do not match level {field.level}")
    field.phi = phi.astype(np.float64)
    field.weight = weight.astype(np.float64)
    return field


# -- PLY -------------------------------------------------------------------

def write_ply_mesh(mesh: TriangleMesh, path: PathLike, ascii: bool = False) -> None:
    attrs = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if mesh.normals is not None:
        attrs += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    vertices = np.empty(len(mesh.vertices), dtype=attrs)
    vertices["x"], vertices["y"], vertices["z"] = mesh.vertices.T
    if mesh.normals is not None:
        vertices["nx"], vertices["ny"], vertices["nz"] = mesh.normals.T
    faces = np.empty(len(mesh.triangles), dtype=[("vertex_indices", "i4", (3,))])
    faces["vertex_indices"] = mesh.triangles
    PlyData([PlyElement.describe(vertices, "vertex"), PlyElement.describe(faces, "face")],
            text=ascii).write(str(path))
    logger.info(f"Wrote mesh with {len(mesh.triangles)} triangles to {path}")


def read_ply_mesh(path: PathLike) -> TriangleMesh:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    ply = PlyData.read(str(path))
    v = ply["vertex"]
    vertices = np.stack([np.asarray(v["x"]), np.asarray(v["y"]), np.asarray(v["z"])], axis=1)
    normals = None
    if "nx" in v.data.dtype.names:
        normals = np.stack([np.asarray(v["nx"]), np.asarray(v["ny"]), np.asarray(v["nz"])], axis=1)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply and len(ply["face"].data):
        faces = np.vstack([np.asarray(f, dtype=np.int64) for f in ply["face"].data["vertex_indices"]])
    return TriangleMesh(vertices, faces, normals)


def write_ply_points(points: np.ndarray, path: PathLike, colors: Optional[np.ndarray] = None,
                     labels: Optional[np.ndarray] = None, ascii: bool = False) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    attrs = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if colors is not None:
        attrs += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if labels is not None:
        attrs += [("label", "i4")]
    el = np.empty(len(points), dtype=attrs)
    el["x"], el["y"], el["z"] = points.T
    if colors is not None:
        rgb = (np.clip(np.asarray(colors, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        el["red"], el["green"], el["blue"] = rgb.T
    if labels is not None:
        el["label"] = np.asarray(labels, dtype=np.int32)
    PlyData([PlyElement.describe(el, "vertex")], text=ascii).write(str(path))


def read_ply_points(path: PathLike) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Points (N, 3) and optional integer labels."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    v = PlyData.read(str(path))["vertex"]
    points = np.stack([np.asarray(v["x"]), np.asarray(v["y"]), np.asarray(v["z"])], axis=1).astype(np.float64)
    labels = np.asarray(v["label"]).astype(np.int64) if "label" in v.data.dtype.names else None
    return points, labels


# -- text tables -----------------------------------------------------------

def write_keys(keys: Sequence[VoxelKey], path: PathLike) -> None:
    Path(path).write_text("".join(f"{k.level} {k.code}\n" for k in keys))


def write_metrics_csv(rows: Sequence[Dict], path: PathLike) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
