"""Command line front end tying the pipeline stages together.

Five subcommands cover the full loop: ``synth`` builds a dataset manifest,
``project`` renders a depth map from one cloud, ``calibrate`` recovers the
injected miscalibrations, ``eval`` scores predictions against the manifest,
``overlay`` blends a depth map over a camera image.

Conventions shared by every subcommand:
  * angles on the command line carry an explicit ``deg`` or ``rad`` suffix
  * failures print one JSON object to stderr ({"error": CODE, "message": ...})
    and exit nonzero
  * each run writes its resolved configuration next to its outputs; the
    ``created`` timestamp in that sidecar is suppressed by --no-timestamps so
    reruns are byte-identical
"""

import argparse
import concurrent.futures
import datetime
import json
import math
import os
import sys
from pathlib import Path

from .camera_projection import (
    CameraIntrinsics,
    densify_maxpool,
    load_depth_png,
    project,
    rasterize,
    save_depth_png,
)
from .dataset import (
    SCENE_KINDS,
    SceneSpec,
    generate_scene,
    load_kitti_calibration,
    load_kitti_velodyne,
    load_manifest,
    save_kitti_velodyne,
    save_manifest,
    synthesize_samples,
)
from .errors import CalibError, PathNotFoundError, ValidationError
from .evaluation import evaluate_batch, render_overlay, render_report, summarize
from .losses import LossWeights
from .optimizer import (
    OptimizerConfig,
    RefinementSchedule,
    optimize_refined,
    optimize_single,
)
from .se3 import MiscalibRange, RigidTransform, compose

DEFAULT_INTRINSICS = CameraIntrinsics(
    fx=721.5377, fy=721.5377, cx=609.5593, cy=172.854, width=1242, height=375
)

STAGE_SHRINK = 5.0


def parse_angle(text: str) -> float:
    """Parse an angle flag into radians; the unit suffix is mandatory."""
    t = str(text).strip().lower()
    try:
        if t.endswith("deg"):
            return math.radians(float(t[:-3]))
        if t.endswith("rad"):
            return float(t[:-3])
    except ValueError:
        raise ValidationError(f"malformed angle {text!r}")
    raise ValidationError(f"angle {text!r} needs an explicit deg or rad suffix")


def resolve_threads(value) -> int:
    if value is None:
        value = os.environ.get("CALIBFORGE_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise ValidationError(f"thread count must be an integer, got {value!r}")
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return n


def _input_path(p) -> Path:
    path = Path(p)
    if not path.exists():
        raise PathNotFoundError(f"input path does not exist: {path}")
    return path


def _output_file(p) -> Path:
    path = Path(p)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise PathNotFoundError(f"output directory does not exist: {parent}")
    return path


def _output_dir(p) -> Path:
    path = Path(p)
    if not path.parent.is_dir():
        raise PathNotFoundError(f"output directory does not exist: {path.parent}")
    path.mkdir(exist_ok=True)
    return path


def _write_config(out: Path, is_dir: bool, subcommand: str, args: dict, timestamps: bool):
    payload = {"subcommand": subcommand, "arguments": args}
    if timestamps:
        payload["created"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    path = out / "config.json" if is_dir else out.with_name(out.stem + ".config.json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolve_cloud(manifest_path: Path, cloud_path: str) -> Path:
    p = Path(cloud_path)
    return p if p.is_absolute() else manifest_path.parent / p


def _intrinsics_from_flags(ns) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=ns.fx, fy=ns.fy, cx=ns.cx, cy=ns.cy, width=ns.width, height=ns.height
    )


def _load_calib_pair(ns):
    if (ns.calib_cam is None) != (ns.calib_velo is None):
        raise ValidationError("--calib-cam and --calib-velo must be given together")
    if ns.calib_cam is None:
        return None
    return load_kitti_calibration(_input_path(ns.calib_cam), _input_path(ns.calib_velo))


def cmd_synth(ns) -> None:
    out = _output_file(ns.out)
    bounds = MiscalibRange(rot_max=parse_angle(ns.range_rot), trans_max=ns.range_trans)
    calib = _load_calib_pair(ns)

    if ns.kitti_velodyne_dir is not None:
        if calib is None:
            raise ValidationError("KITTI mode needs --calib-cam and --calib-velo")
        scan_dir = _input_path(ns.kitti_velodyne_dir)
        cloud_paths = sorted(str(p) for p in scan_dir.glob("*.bin"))
        if not cloud_paths:
            raise PathNotFoundError(f"no .bin scans under {scan_dir}")
        intrinsics, base = calib
    else:
        if calib is not None:
            intrinsics, base = calib
        else:
            intrinsics = _intrinsics_from_flags(ns)
            base = RigidTransform.identity()
        cloud_dir = out.with_name(out.stem + "_clouds")
        cloud_dir.mkdir(exist_ok=True)
        cloud_paths = []
        for i in range(ns.clouds):
            spec = SceneSpec(
                kind=ns.scene, point_count=ns.points, extent=ns.extent, seed=ns.seed + i
            )
            path = cloud_dir / f"cloud_{i:03d}.bin"
            save_kitti_velodyne(generate_scene(spec), path)
            # keep the manifest relocatable: paths relative to the manifest
            cloud_paths.append(os.path.relpath(path, out.parent))

    manifest = synthesize_samples(cloud_paths, intrinsics, base, bounds, ns.count, ns.seed)
    save_manifest(manifest, out)
    _write_config(
        out,
        False,
        "synth",
        {
            "scene": ns.scene,
            "count": ns.count,
            "clouds": ns.clouds,
            "points": ns.points,
            "extent": ns.extent,
            "range_rot_rad": bounds.rot_max,
            "range_trans_m": bounds.trans_max,
            "seed": ns.seed,
            "out": str(out),
        },
        not ns.no_timestamps,
    )


def cmd_project(ns) -> None:
    out = _output_file(ns.out)
    cloud = load_kitti_velodyne(_input_path(ns.cloud))
    calib = _load_calib_pair(ns)
    if calib is not None:
        intrinsics, extrinsics = calib
    else:
        intrinsics = _intrinsics_from_flags(ns)
        extrinsics = RigidTransform.identity()
    dm = rasterize(project(cloud, intrinsics, extrinsics), intrinsics)
    if ns.densify:
        dm = densify_maxpool(dm, ns.densify)
    save_depth_png(dm, out)
    _write_config(
        out,
        False,
        "project",
        {"cloud": str(ns.cloud), "densify": ns.densify, "out": str(out)},
        not ns.no_timestamps,
    )


def _build_schedule(manifest_range: MiscalibRange, ns):
    step = tuple(ns.initial_step) if ns.initial_step is not None else None
    cfg = OptimizerConfig(
        method=ns.method,
        max_iters=ns.max_iters,
        initial_step=step,
        convergence_tol=ns.tol,
    )
    if ns.stages == 1:
        return None, cfg
    stages = tuple(
        (
            MiscalibRange(
                rot_max=manifest_range.rot_max / STAGE_SHRINK**i,
                trans_max=manifest_range.trans_max / STAGE_SHRINK**i,
            ),
            cfg,
        )
        for i in range(ns.stages)
    )
    return RefinementSchedule(stages), cfg


def cmd_calibrate(ns) -> None:
    manifest_path = _input_path(ns.manifest)
    out = _output_file(ns.out)
    manifest = load_manifest(manifest_path)
    w = LossWeights(ns.lambda_t, ns.lambda_d, ns.lambda_p, ns.alpha)
    sched, cfg = _build_schedule(manifest.range, ns)
    threads = resolve_threads(ns.threads)

    done = set()
    if out.exists():
        for line in out.read_text().splitlines():
            if line.strip():
                done.add(json.loads(line)["sample_id"])
    pending = [s for s in manifest.samples if s.id not in done]

    def solve(sample):
        cloud = load_kitti_velodyne(_resolve_cloud(manifest_path, sample.cloud_path))
        if sched is None:
            return sample.id, optimize_single(sample, w, cfg, cloud=cloud)
        return sample.id, optimize_refined(sample, w, sched, cloud=cloud)

    # workers run per sample; the output file is appended to serially so an
    # interrupted run leaves only whole lines behind
    with out.open("a") as fh:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            for sample_id, result in pool.map(solve, pending):
                line = dict(result.to_json_dict())
                line["sample_id"] = sample_id
                fh.write(json.dumps(line, sort_keys=True) + "\n")
                fh.flush()

    _write_config(
        out,
        False,
        "calibrate",
        {
            "manifest": str(manifest_path),
            "stages": ns.stages,
            "method": ns.method,
            "max_iters": ns.max_iters,
            "initial_step": ns.initial_step,
            "tol": ns.tol,
            "lambda_t": ns.lambda_t,
            "lambda_d": ns.lambda_d,
            "lambda_p": ns.lambda_p,
            "alpha": ns.alpha,
            "threads": threads,
            "out": str(out),
        },
        not ns.no_timestamps,
    )


def _read_results(path: Path):
    pairs = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pairs.append((obj["sample_id"], RigidTransform.from_json_dict(obj["predicted"])))
        except (json.JSONDecodeError, KeyError, TypeError):
            raise ValidationError(f"malformed results line {lineno} in {path}")
    return pairs


def cmd_eval(ns) -> None:
    manifest_path = _input_path(ns.manifest)
    results_path = _input_path(ns.results)
    out_dir = _output_dir(ns.out)
    manifest = load_manifest(manifest_path)
    pairs = _read_results(results_path)

    records = evaluate_batch(pairs, manifest)
    with (out_dir / "records.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
    summary = summarize(records)
    render_report(summary, out_dir)

    if ns.overlays:
        overlay_dir = out_dir / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        predicted = dict(pairs)
        for sample in manifest.samples:
            if sample.image_path is None or sample.id not in predicted:
                continue
            cloud = load_kitti_velodyne(_resolve_cloud(manifest_path, sample.cloud_path))
            corrected = compose(
                predicted[sample.id],
                compose(sample.miscalibration, sample.base_extrinsics),
            )
            dm = rasterize(project(cloud, sample.intrinsics, corrected), sample.intrinsics)
            render_overlay(sample.image_path, dm, overlay_dir / f"{sample.id}.png")

    _write_config(
        out_dir,
        True,
        "eval",
        {
            "manifest": str(manifest_path),
            "results": str(results_path),
            "overlays": ns.overlays,
            "out": str(out_dir),
        },
        not ns.no_timestamps,
    )


def cmd_overlay(ns) -> None:
    out = _output_file(ns.out)
    image = _input_path(ns.image)
    dm = load_depth_png(_input_path(ns.depth))
    if ns.densify:
        dm = densify_maxpool(dm, ns.densify)
    render_overlay(image, dm, out, alpha=ns.alpha)
    _write_config(
        out,
        False,
        "overlay",
        {
            "image": str(image),
            "depth": str(ns.depth),
            "alpha": ns.alpha,
            "densify": ns.densify,
            "out": str(out),
        },
        not ns.no_timestamps,
    )


def _add_camera_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fx", type=float, default=DEFAULT_INTRINSICS.fx)
    p.add_argument("--fy", type=float, default=DEFAULT_INTRINSICS.fy)
    p.add_argument("--cx", type=float, default=DEFAULT_INTRINSICS.cx)
    p.add_argument("--cy", type=float, default=DEFAULT_INTRINSICS.cy)
    p.add_argument("--width", type=int, default=DEFAULT_INTRINSICS.width)
    p.add_argument("--height", type=int, default=DEFAULT_INTRINSICS.height)


def _add_calib_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--calib-cam", help="KITTI cam_to_cam calibration file")
    p.add_argument("--calib-velo", help="KITTI velo_to_cam calibration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calibforge")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a miscalibrated dataset manifest")
    p.add_argument("--scene", choices=SCENE_KINDS, default="ground-plane-walls")
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--clouds", type=int, default=1, help="distinct scenes to generate")
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--extent", type=float, default=20.0)
    p.add_argument("--range-rot", required=True, help="per-axis bound, e.g. 10deg")
    p.add_argument("--range-trans", type=float, required=True, help="per-axis bound in m")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kitti-velodyne-dir", help="use real scans instead of synthetic scenes")
    _add_calib_flags(p)
    _add_camera_flags(p)
    p.add_argument("--out", required=True, help="manifest path (.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project", help="render one cloud to a 16-bit depth PNG")
    p.add_argument("--cloud", required=True, help="velodyne .bin file")
    p.add_argument("--densify", type=int, default=0, help="odd max-pool window, 0 = off")
    _add_calib_flags(p)
    _add_camera_flags(p)
    p.add_argument("--out", required=True, help="depth PNG path")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("calibrate", help="recover miscalibrations for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stages", type=int, default=2, help="refinement stages")
    p.add_argument("--method", choices=("nelder-mead", "gradient-descent-fd"),
                   default="nelder-mead")
    p.add_argument("--max-iters", type=int, default=400, help="per-stage budget")
    p.add_argument("--initial-step", type=float, nargs=2, default=None,
                   metavar=("ROT", "TRANS"), help="simplex step in rad and m")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--lambda-t", type=float, default=4.0)
    p.add_argument("--lambda-d", type=float, default=1.0)
    p.add_argument("--lambda-p", type=float, default=40.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--threads", default=None,
                   help="worker threads (default: CALIBFORGE_THREADS or all cores)")
    p.add_argument("--out", required=True, help="results JSON-lines path (resumable)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="score predictions against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--results", required=True, help="calibrate output JSON-lines")
    p.add_argument("--overlays", action="store_true",
                   help="render overlays for samples that carry an image")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="blend a depth map over a camera image")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True, help="depth PNG from the project subcommand")
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--densify", type=int, default=0, help="odd max-pool window, 0 = off")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    for sp in sub.choices.values():
        sp.add_argument("--no-timestamps", action="store_true",
                        help="omit the created field from the config sidecar")

    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        ns.func(ns)
    except CalibError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": "PATH_NOT_FOUND", "message": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "IO", "message": str(exc)}, sort_keys=True),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
