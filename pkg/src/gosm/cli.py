"""Command-line interface (``gosm`` or ``python -m gosm``).

Exit codes: 0 success, 2 usage, 3 data error, 4 no match, 5 not found,
6 planning failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import errors
from .config import Settings, load_settings, render_settings
from .core import CameraIntrinsics, Pose, SplatMap
from .dataset import load_manifest, write_depth, write_rgb
from .evaluation import evaluate_queries, load_ground_truth
from .mapfile import load_map, save_map
from .pipeline import reconstruct
from .planner import nearest_free_point, plan, write_waypoints
from .query import export_localization, localize
from .rasterizer import render
from .semantics import EmbeddingLookup, EmbeddingTable, FixtureProvider, RemoteEmbedder, RemoteProvider
from .synth import SynthConfig, generate

log = logging.getLogger("gosm")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NO_MATCH = 4
EXIT_NOT_FOUND = 5
EXIT_PLANNING = 6


class UsageError(Exception):
    pass


# flag attribute -> (config section, option)
_FLAG_OPTIONS = {
    "fixtures": ("provider", "fixtures"),
    "provider_url": ("provider", "url"),
    "embeddings": ("provider", "embedding_table"),
    "embedding_url": ("provider", "embedding_url"),
    "map_seed": ("mapper", "seed"),
    "plan_seed": ("planner", "seed"),
    "robot_radius": ("planner", "robot_radius"),
    "iou_threshold": ("eval", "iou_threshold"),
}


def _xyz(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _add_provider_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("semantics provider")
    g.add_argument("--fixtures", metavar="DIR", help="segmentation fixture directory")
    g.add_argument("--provider-url", metavar="URL", help="remote segmentation endpoint")
    g.add_argument("--embeddings", metavar="FILE", help="embedding table (dim header + label<TAB>csv)")
    g.add_argument("--embedding-url", metavar="URL", help="remote text-embedding endpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gosm", description="Object-aware Gaussian splat SLAM, queries and planning.")
    parser.add_argument("--config", metavar="INI", help="configuration file (flags override it)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value; repeatable")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic RGB-D room dataset")
    p.add_argument("out_dir")
    p.add_argument("--frames", type=int, default=SynthConfig.frames)
    p.add_argument("--width", type=int, default=SynthConfig.width)
    p.add_argument("--height", type=int, default=SynthConfig.height)
    p.add_argument("--focal", type=float, default=SynthConfig.focal)

    p = sub.add_parser("reconstruct", help="build a tagged splat map from an RGB-D manifest")
    p.add_argument("manifest")
    p.add_argument("out_map")
    p.add_argument("--seed", dest="map_seed", type=int, help="mapping RNG seed")
    p.add_argument("--trajectory", metavar="FILE", help="write estimated poses (index + 12 values per line)")
    _add_provider_flags(p)

    p = sub.add_parser("query", help="localize an object by text")
    p.add_argument("map")
    p.add_argument("text")
    p.add_argument("--out", metavar="PLY", help="write the localization point cloud")
    p.add_argument("--manifest", help="use recorded keyframe images instead of map renders")
    _add_provider_flags(p)

    p = sub.add_parser("plan", help="plan a path from a start point to a goal point or queried object")
    p.add_argument("map")
    p.add_argument("--start", nargs=3, type=_xyz, required=True, metavar=("X", "Y", "Z"))
    goal = p.add_mutually_exclusive_group(required=True)
    goal.add_argument("--goal", nargs=3, type=_xyz, metavar=("X", "Y", "Z"))
    goal.add_argument("--query", metavar="TEXT", help="plan to the centre of this object")
    p.add_argument("--standoff", action="store_true",
                   help="if the goal is in collision, aim for the nearest free point instead")
    p.add_argument("--out", metavar="FILE", help="waypoint file (x y z per line)")
    p.add_argument("--seed", dest="plan_seed", type=int)
    p.add_argument("--robot-radius", type=float)
    p.add_argument("--manifest", help="use recorded keyframe images for --query")
    _add_provider_flags(p)

    p = sub.add_parser("eval", help="run a query list against ground-truth boxes")
    p.add_argument("map")
    p.add_argument("queries", help="one query per line")
    p.add_argument("gt", help="ground truth: label xmin ymin zmin xmax ymax zmax per line")
    p.add_argument("--report", metavar="JSON", help="write the structured report")
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--manifest", help="use recorded keyframe images instead of map renders")
    _add_provider_flags(p)

    p = sub.add_parser("render", help="render rgb, depth and silhouette images of a map")
    p.add_argument("map")
    p.add_argument("out_prefix")
    view = p.add_mutually_exclusive_group(required=True)
    view.add_argument("--pose", help="12 numbers: row-major rotation then translation (camera to world)")
    view.add_argument("--keyframe", type=int, help="use a stored keyframe pose")
    p.add_argument("--intrinsics", nargs=6, type=float, metavar=("FX", "FY", "CX", "CY", "W", "H"),
                   help="required when the map stores none")

    sub.add_parser("config", help="print the effective configuration")
    return parser


def _settings(args) -> Settings:
    overrides: dict[str, dict[str, str]] = {}
    for attr, (section, key) in _FLAG_OPTIONS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = str(value)
    for item in args.set:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides.setdefault(section, {})[key] = value.strip()
    try:
        return load_settings(args.config, overrides)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"configuration: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"configuration file: {exc}") from exc


def _provider(settings: Settings, required: bool):
    pc = settings.provider
    if pc.url:
        return RemoteProvider(pc.url, pc.timeout, pc.retries)
    if pc.fixtures:
        return FixtureProvider(pc.fixtures)
    if required:
        raise UsageError("a segmentation provider is needed: pass --fixtures or --provider-url")
    return None


def _embeddings(settings: Settings) -> EmbeddingLookup | None:
    pc = settings.provider
    table = EmbeddingTable.load(pc.embedding_table) if pc.embedding_table else None
    remote = RemoteEmbedder(pc.embedding_url, pc.timeout, pc.retries) if pc.embedding_url else None
    if table is None and remote is None:
        return None
    return EmbeddingLookup(table, remote)


def _keyframe_frames(manifest_path, m: SplatMap):
    if not manifest_path:
        return None
    man = load_manifest(manifest_path)
    frames = {}
    for entry in man.frames:
        if entry.index in m.keyframes:
            f = man.load_frame(entry)
            f.pose = m.keyframes[entry.index]
            f.is_keyframe = True
            frames[entry.index] = f
    return frames


def _localize(m: SplatMap, text: str, settings: Settings, manifest_path=None):
    provider = _provider(settings, required=True)
    lookup = _embeddings(settings)
    vec = lookup.get(text) if lookup is not None else None
    if vec is None:
        raise errors.NoMatchError(f"no embedding available for query {text!r}")
    return localize(m, vec, provider, settings.query, query_text=text,
                    frames=_keyframe_frames(manifest_path, m))


def _fmt(v) -> str:
    return " ".join(f"{x:.6f}" for x in np.asarray(v, dtype=float))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, settings: Settings) -> int:
    cfg = SynthConfig(frames=args.frames, width=args.width, height=args.height, focal=args.focal)
    manifest = generate(args.out_dir, cfg)
    print(f"wrote {cfg.frames} frames ({cfg.width}x{cfg.height}) to {manifest}")
    return EXIT_OK


def cmd_reconstruct(args, settings: Settings) -> int:
    manifest = load_manifest(args.manifest)
    provider = _provider(settings, required=False)
    embeddings = _embeddings(settings)

    def progress(rec, m):
        loss = "-" if rec.tracking_loss is None else f"{rec.tracking_loss:.6f}"
        line = f"frame {rec.index:4d}  track_loss {loss:>9}  splats {len(m):6d}  objects {rec.objects}"
        if rec.keyframe:
            line += f"  keyframe +{rec.added} map_loss {rec.mapping_loss:.6f}"
        print(line, flush=True)

    m, logs = reconstruct(manifest, settings.pipeline, provider, embeddings, progress)
    save_map(m, args.out_map)
    if args.trajectory:
        Path(args.trajectory).write_text("".join(
            f"{r.index} " + " ".join(f"{x:.9f}" for x in r.pose.to_rt12()) + "\n" for r in logs))
    tagged = int(np.count_nonzero(m.object_ids >= 0))
    print(f"map {args.out_map}: {len(m)} splats, {len(m.registry)} objects, {tagged} tagged splats, "
          f"{len(m.keyframes)} keyframes")
    return EXIT_OK


def cmd_query(args, settings: Settings) -> int:
    m = load_map(args.map)
    res = _localize(m, args.text, settings, args.manifest)
    print(f"label {res.matched_label}")
    print(f"score {res.score:.6f}")
    print(f"goal {_fmt(res.goal_point)}")
    print(f"bbox {_fmt(res.bbox_min)} {_fmt(res.bbox_max)}")
    print(f"splats {len(res.splat_indices)} ids {' '.join(str(i) for i in sorted(res.object_ids))}")
    print(f"keyframe {res.keyframe}{' (fallback)' if res.fallback_used else ''}")
    if args.out:
        export_localization(m, res, args.out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_plan(args, settings: Settings) -> int:
    m = load_map(args.map)
    if args.query is not None:
        goal = localize_goal = _localize(m, args.query, settings, args.manifest).goal_point
        print(f"query goal {_fmt(localize_goal)}")
    else:
        goal = np.asarray(args.goal, dtype=float)
    if args.standoff:
        moved = nearest_free_point(m, goal, settings.planner.robot_radius)
        if not np.array_equal(moved, goal):
            print(f"goal moved to nearest free point {_fmt(moved)}")
        goal = moved
    waypoints, length = plan(m, np.asarray(args.start, dtype=float), goal, settings.planner)
    print(f"path {len(waypoints)} waypoints, length {length:.6f}")
    for w in waypoints:
        print(f"  {_fmt(w)}")
    if args.out:
        write_waypoints(args.out, waypoints)
        print(f"wrote {args.out}")
    return EXIT_OK


def _read_queries(path) -> list[str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise errors.DatasetError(f"cannot read queries: {exc}") from exc
    queries = [ln.split("#", 1)[0].strip() for ln in lines]
    queries = [q for q in queries if q]
    if not queries:
        raise errors.DatasetError(f"{path}: no queries")
    return queries


def cmd_eval(args, settings: Settings) -> int:
    m = load_map(args.map)
    queries = _read_queries(args.queries)
    try:
        gt = load_ground_truth(args.gt)
    except OSError as exc:
        raise errors.DatasetError(f"cannot read ground truth: {exc}") from exc
    results = []
    for q in queries:
        try:
            results.append((q, _localize(m, q, settings, args.manifest)))
        except (errors.NoMatchError, errors.NotFoundError) as exc:
            results.append((q, exc))
    report = evaluate_queries(results, gt, settings.eval.iou_threshold, settings.eval.scene, settings.eval.method)
    print(report.table())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
        print(f"wrote {args.report}")
    return EXIT_OK


def _parse_pose(text: str) -> Pose:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"--pose: not a list of numbers: {text!r}") from None
    if len(vals) != 12:
        raise UsageError(f"--pose needs 12 numbers, got {len(vals)}")
    return Pose.from_rt12(vals)


def cmd_render(args, settings: Settings) -> int:
    m = load_map(args.map)
    if args.pose is not None:
        pose = _parse_pose(args.pose)
    else:
        if args.keyframe not in m.keyframes:
            raise errors.DatasetError(f"map has no keyframe {args.keyframe}")
        pose = m.keyframes[args.keyframe]
    if args.intrinsics is not None:
        fx, fy, cx, cy, w, h = args.intrinsics
        if w != int(w) or h != int(h) or w < 1 or h < 1:
            raise UsageError("--intrinsics: width and height must be positive integers")
        K = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    elif m.intrinsics is not None:
        K = m.intrinsics
    else:
        raise UsageError("the map stores no intrinsics; pass --intrinsics")
    out = render(m, pose, K)
    prefix = args.out_prefix
    write_rgb(f"{prefix}_rgb.png", out.rgb)
    write_depth(f"{prefix}_depth.png", np.where(out.silhouette > 0, out.depth, 0.0), 1000.0)
    write_rgb(f"{prefix}_silhouette.png", np.repeat(out.silhouette[..., None], 3, axis=2))
    print(f"wrote {prefix}_rgb.png {prefix}_depth.png {prefix}_silhouette.png")
    return EXIT_OK


def cmd_config(args, settings: Settings) -> int:
    print(render_settings(settings), end="")
    return EXIT_OK


_COMMANDS = {"synth": cmd_synth, "reconstruct": cmd_reconstruct, "query": cmd_query, "plan": cmd_plan,
             "eval": cmd_eval, "render": cmd_render, "config": cmd_config}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, errors.NoMatchError):
        return EXIT_NO_MATCH
    if isinstance(exc, errors.NotFoundError):
        return EXIT_NOT_FOUND
    if isinstance(exc, (errors.BlockedEndpointError, errors.PlanningInfeasibleError, errors.UnreachableError)):
        return EXIT_PLANNING
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = _settings(args)
        if args.command != "config":
            sys.stderr.write("# effective configuration\n" + render_settings(settings))
        return _COMMANDS[args.command](args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gosm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (errors.GosmError, OSError, ValueError) as exc:
        print(f"gosm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
