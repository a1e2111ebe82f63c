"""Command-line entry point: ``python -m voxfuse <command> ...``."""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from voxfuse import __version__
from voxfuse.errors import EXIT_OK, EXIT_USAGE, DataError, VoxfuseError, exit_code_for
from voxfuse.formats import (load_tsdf, read_grid, read_ply_mesh, read_ply_points, save_png, save_tsdf, write_grid,
                             write_image, write_keys, write_metrics_csv, write_ply_mesh, write_ply_points, slug)
from voxfuse.mesh import boundary_edge_count, extract_mesh
from voxfuse.models import Settings
from voxfuse.config import load_settings
from voxfuse.pipeline import build, evaluate, fuse_scene, stitch
from voxfuse.query import edit_voxels, feature_pca_colors, mask3d, mean_class_accuracy, relevance, \
    render_relevance, solid_color_sh, transfer_pointcloud
from voxfuse.render import render
from voxfuse.scene import load_scene, save_scene, update_view_features
from voxfuse.synth import five_objects, single_sphere, synth_scene

logger = logging.getLogger(__name__)

GRID_FILE = "grid.lesv"
FUSED_FILE = "fused.lesv"
TSDF_FILE = "tsdf.npz"
MESH_FILE = "mesh.ply"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxfuse", description="Sparse-voxel feature fusion and open-vocabulary queries")
    parser.add_argument("--version", action="version", version=f"voxfuse {__version__}")
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--threads", type=int, help="worker threads")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("out_dir")
    p.add_argument("--preset", choices=["five-objects", "sphere"], default="five-objects")
    p.add_argument("--noise", type=float)
    p.add_argument("--views", type=int)
    p.add_argument("--level", type=int)
    p.add_argument("--size", type=int, help="image width and height")
    p.add_argument("--points", type=int)
    p.add_argument("--crops", action="store_true", help="emit crop features instead of full maps")

    p = sub.add_parser("build", help="integrate depth, blend levels and voxelize")
    p.add_argument("scene_dir")
    p.add_argument("--out")
    p.add_argument("--level", type=int)

    p = sub.add_parser("mesh", help="extract the TSDF surface as PLY")
    p.add_argument("scene_dir")
    p.add_argument("--ascii", action="store_true")

    p = sub.add_parser("stitch", help="blend crop features into per-view maps")
    p.add_argument("scene_dir")

    p = sub.add_parser("fuse", help="fuse view features into the grid")
    p.add_argument("scene_dir")

    p = sub.add_parser("query", help="relevance, masks, renders and edits")
    p.add_argument("scene_dir")
    p.add_argument("--label", help="query a single label")
    p.add_argument("--threshold", type=float)
    p.add_argument("--render", type=int, metavar="VIEW", help="render relevance into this view")
    p.add_argument("--edit-color", help="recolor the mask, as r,g,b in [0, 1]")
    p.add_argument("--pca", action="store_true", help="export feature PCA colors as PLY")

    p = sub.add_parser("transfer", help="label a point cloud from the fused grid")
    p.add_argument("scene_dir")
    p.add_argument("--points", help="PLY point cloud (defaults to the scene's points)")
    p.add_argument("--k", type=int)

    p = sub.add_parser("eval", help="retrieval metrics and geometry losses")
    p.add_argument("scene_dir")
    return parser


def _color(text: str):
    try:
        rgb = tuple(float(c) for c in text.split(","))
    except ValueError:
        raise UsageError(f"invalid color '{text}'") from None
    if len(rgb) != 3 or any(c < 0.0 or c > 1.0 for c in rgb):
        raise UsageError("color must be three comma-separated values in [0, 1]")
    return rgb


def _require(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"{path} not found; run the earlier pipeline stage first")
    return path


def cmd_synth(args, settings: Settings) -> None:
    overrides = {k: v for k, v in {"noise": args.noise, "views": args.views, "level": args.level,
                                   "points": args.points}.items() if v is not None}
    if args.size is not None:
        overrides.update(width=args.size, height=args.size)
    if args.crops:
        overrides["crops"] = True
        overrides["crop_size"] = settings.stitch.crop_size
    spec = single_sphere(**overrides) if args.preset == "sphere" else five_objects(**overrides)
    scene = synth_scene(spec, seed=settings.seed)
    save_scene(scene, args.out_dir)


def cmd_build(args, settings: Settings) -> None:
    root = Path(args.scene_dir)
    scene = load_scene(root)
    if args.level is not None:
        scene.level = args.level
    built = build(scene, settings)
    write_grid(built.grid, Path(args.out) if args.out else root / GRID_FILE)
    save_tsdf(built.blended, root / TSDF_FILE)


def cmd_mesh(args, settings: Settings) -> None:
    root = Path(args.scene_dir)
    field = load_tsdf(_require(root / TSDF_FILE))
    mesh = extract_mesh(field)
    if mesh.is_empty:
        logger.warning("No surface found; writing an empty mesh")
    else:
        logger.info(f"Mesh boundary edges: {boundary_edge_count(mesh)}")
    write_ply_mesh(mesh, root / MESH_FILE, ascii=args.ascii)


def cmd_stitch(args, settings: Settings) -> None:
    scene = load_scene(args.scene_dir)
    update_view_features(args.scene_dir, stitch(scene, settings))


def cmd_fuse(args, settings: Settings) -> None:
    root = Path(args.scene_dir)
    scene = load_scene(root)
    grid = read_grid(_require(root / GRID_FILE))
    mesh_path = root / MESH_FILE
    mesh = read_ply_mesh(mesh_path) if mesh_path.is_file() else extract_mesh(load_tsdf(_require(root / TSDF_FILE)))
    stats = fuse_scene(grid, scene, mesh, settings)
    for name, conf in zip(scene.names, stats.view_confidence):
        logger.info(f"View {name}: mean confidence {conf:.3f}")
    logger.info(f"Unfused fraction {stats.unfused_fraction:.3f}, peak accumulator {stats.peak_accumulator_bytes} bytes")
    write_grid(grid, root / FUSED_FILE)


def cmd_query(args, settings: Settings) -> None:
    root = Path(args.scene_dir)
    scene = load_scene(root)
    grid = read_grid(_require(root / FUSED_FILE))
    threshold = args.threshold if args.threshold is not None else settings.query.threshold
    embeddings = scene.embeddings
    if args.label is not None:
        embeddings = [e for e in embeddings if e.label == args.label]
        if not embeddings:
            raise DataError(f"no embedding labelled '{args.label}'")
    edited = False
    for emb in embeddings:
        result = relevance(grid, emb)
        mask = mask3d(grid, result, threshold)
        stem = slug(emb.label)
        write_keys(mask.keys, root / f"query_{stem}.keys")
        write_ply_points(mask.points, root / f"query_{stem}.ply")
        logger.info(f"Query '{emb.label}': {len(mask.indices)} voxels at threshold {threshold}")
        if args.render is not None:
            cam = _view(scene, args.render)
            rel = render_relevance(grid, result, cam, settings.render.samples_per_interval,
                                   settings.threads, settings.render.row_block)
            write_image(rel, root / f"query_{stem}_view{args.render:03d}.limg")
            save_png(rel, root / f"query_{stem}_view{args.render:03d}.png", vmin=0.0, vmax=1.0)
        if args.edit_color:
            edit_voxels(grid, mask.keys, solid_color_sh(_color(args.edit_color), grid.sh_degree))
            edited = True
    if edited:
        write_grid(grid, root / "edited.lesv")
        if args.render is not None:
            color = render(grid, _view(scene, args.render), settings.render.samples_per_interval,
                           settings.render.alpha_valid_min, settings.threads, settings.render.row_block).color
            save_png(color, root / f"edited_view{args.render:03d}.png")
    if args.pca:
        write_ply_points(grid.centers(), root / "features_pca.ply", colors=feature_pca_colors(grid))


def _view(scene, index: int):
    if not 0 <= index < len(scene.cameras):
        raise UsageError(f"view {index} out of range (scene has {len(scene.cameras)} views)")
    return scene.cameras[index]


def cmd_transfer(args, settings: Settings) -> None:
    root = Path(args.scene_dir)
    scene = load_scene(root)
    grid = read_grid(_require(root / FUSED_FILE))
    if args.points:
        points, gt = read_ply_points(args.points)
    else:
        points, gt = scene.points, scene.point_labels
    if points is None or len(points) == 0:
        raise DataError("no points to label")
    k = args.k if args.k is not None else settings.transfer.k
    result = transfer_pointcloud(grid, points, scene.embeddings, k, settings.transfer.cell_voxels,
                                 settings.transfer.chunk, settings.threads)
    write_ply_points(points, root / "points_labeled.ply", labels=result.labels)
    if gt is not None:
        logger.info(f"Point transfer mAcc {mean_class_accuracy(result.labels, gt, len(scene.embeddings)):.3f}")


def cmd_eval(args, settings: Settings) -> None:
    root = Path(args.scene_dir)
    scene = load_scene(root)
    grid = read_grid(_require(root / FUSED_FILE))
    evaluation = evaluate(scene, grid, settings)
    rows = [{"label": r["label"], "iou": r.get("iou"), "acc25": r.get("acc25_hit"), "loc_hit": r.get("loc_hit")}
            for r in evaluation.rows]
    write_metrics_csv(rows, root / "metrics.csv")
    (root / "summary.json").write_text(json.dumps(evaluation.summary, indent=2))
    for name, value in evaluation.summary.items():
        logger.info(f"{name}: {value}")


COMMANDS = {
    "synth": cmd_synth, "build": cmd_build, "mesh": cmd_mesh, "stitch": cmd_stitch, "fuse": cmd_fuse,
    "query": cmd_query, "transfer": cmd_transfer, "eval": cmd_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"voxfuse: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return EXIT_OK if not e.code else EXIT_USAGE

    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s', force=True)
    try:
        overrides = {k: v for k, v in {"THREADS": args.threads, "SEED": args.seed}.items() if v is not None}
        settings = load_settings(args.config, overrides=overrides)
        COMMANDS[args.command](args, settings)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except VoxfuseError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    return EXIT_OK
