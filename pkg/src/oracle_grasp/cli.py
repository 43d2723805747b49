"""Command-line entry point.

Exit codes: 0 success, 1 pipeline/runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import base64
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

from .config import Settings, load_settings, make_oracle
from .evaluation import EvalReport, evaluate_image, load_annotation
from .geometry import Point
from .io import LoadError, canonical_json, image_digest, load_depth, load_manifest, load_rgb, save_rgb
from .oracle import ENDPOINT_ENV, OracleError, ReplayOracle
from .pipeline import ConfigError, PipelineConfig, PipelineError, predict_grasp
from .synth import SCENES, write_scenes
from .transcript import read_transcript, write_transcript

log = logging.getLogger("oracle_grasp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

PIPELINE_HELP = {
    "grp_iterations": "total grasp-region query budget K",
    "stop_window": "early-stop window m (queries before the convergence check)",
    "iou_threshold": "IoU above which two masks contribute their intersection",
    "stop_factor": "early stop when all centers lie within this fraction of the image diagonal",
    "min_axis_angle_deg": "orientation refinement fires when the centers' axis exceeds this angle",
    "anisotropy_min": "minimum eigenvalue ratio for orientation refinement",
    "grid_schedule": "grid sizes in query order, e.g. 3x3,4x4,5x5",
    "crop_margin_frac": "crop window margin as a fraction of the mask-union diagonal",
    "crop_iters": "queries on the cropped image after the first convergence check (default: same as --stop-window)",
    "crop_counts_against_budget": "count crop-stage queries against K",
    "continuous_early_stop": "re-check convergence after every query past m",
    "early_stop_pose_source": "after an early stop, estimate the pose from crop-stage masks or all masks",
    "max_parse_retries": "re-asks per iteration when the oracle reply cannot be parsed",
    "depth_samples": "number of depth samples w for grasp refinement",
    "use_scp": "query the scene-context prompt first",
    "use_orientation_refinement": "re-query on an image rotated to the centers' principal axis",
    "use_explanation": "ask for a brief explanation alongside the grid cell",
    "use_depth_refinement": "refine the grasp point with the depth map when one is given",
    "overlay_mode": "draw the grid on images sent to the oracle ('grid') or not ('none')",
    "overlay_thickness": "grid line thickness in pixels",
    "overlay_color": "grid line color as R,G,B",
}

ABLATIONS = {
    "scp": "use_scp",
    "or": "use_orientation_refinement",
    "be": "use_explanation",
    "gr": "use_depth_refinement",
}


class UsageError(Exception):
    pass


def _grid_schedule(text: str) -> tuple[tuple[int, int], ...]:
    try:
        pairs = []
        for part in text.split(","):
            u, v = part.lower().split("x")
            pairs.append((int(u), int(v)))
        return tuple(pairs)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid schedule {text!r}; expected e.g. 3x3,4x4") from None


def _rgb(text: str) -> tuple[int, int, int]:
    try:
        r, g, b = (int(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad color {text!r}; expected R,G,B") from None
    return (r, g, b)


def _point(text: str) -> tuple[float, float]:
    try:
        x, y = (float(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad point {text!r}; expected X,Y") from None
    return (x, y)


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("pipeline (each flag overrides one config field)")
    defaults = PipelineConfig()
    for f in dataclasses.fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        help_text = PIPELINE_HELP[f.name]
        if f.name != "crop_iters":
            help_text += f" (default: {default})"
        if f.name == "grid_schedule":
            group.add_argument(flag, dest=f.name, type=_grid_schedule, default=None, help=help_text)
        elif f.name == "overlay_color":
            group.add_argument(flag, dest=f.name, type=_rgb, default=None, help=help_text)
        elif f.name == "crop_iters":
            group.add_argument(flag, dest=f.name, type=int, default=None, help=help_text)
        elif f.name == "overlay_mode":
            group.add_argument(flag, dest=f.name, choices=("grid", "none"), default=None, help=help_text)
        elif f.name == "early_stop_pose_source":
            group.add_argument(flag, dest=f.name, choices=("crop", "all"), default=None, help=help_text)
        elif isinstance(default, bool):
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                               help=help_text)
        else:
            group.add_argument(flag, dest=f.name, type=type(default), default=None, help=help_text)
    group.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), default=[],
                       help="disable a component: scp, or (orientation refinement), "
                            "be (brief explanation), gr (depth grasp refinement); repeatable")


def _add_oracle_flags(parser: argparse.ArgumentParser, backends: Sequence[str] = ("scripted", "replay", "http")) -> None:
    group = parser.add_argument_group("oracle")
    group.add_argument("--oracle", dest="backend", choices=backends, default=None,
                       help="oracle backend (default: scripted, or the config file's oracle.backend)")
    group.add_argument("--target", dest="targets", type=_point, action="append", default=None,
                       help="scripted oracle target X,Y in pixels; repeat to cycle through several")
    group.add_argument("--scripted-mode", dest="mode", choices=("target", "random"), default=None,
                       help="scripted oracle behaviour: target cell or uniformly random cell")
    group.add_argument("--noise-radius", type=float, default=None, help="scripted target jitter radius (px)")
    group.add_argument("--seed", type=int, default=None, help="seed for all scripted randomness")
    group.add_argument("--context-text", default=None, help="scripted scene-context reply")
    group.add_argument("--endpoint", default=None, help=f"chat-completions URL (or ${ENDPOINT_ENV})")
    group.add_argument("--model", default=None, help="model name sent to the endpoint")
    group.add_argument("--temperature", type=float, default=None, help="sampling temperature (default 0.6)")
    group.add_argument("--timeout", type=float, default=None, help="HTTP timeout in seconds")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--focal-px", type=float, default=None, help="camera focal length in pixels")
    parser.add_argument("--clearance-m", type=float, default=None, help="gripper clearance radius in meters")
    _add_pipeline_flags(parser)


def _settings_from_args(args: argparse.Namespace, extra_oracle: dict | None = None) -> Settings:
    pipe = {f.name: getattr(args, f.name, None) for f in dataclasses.fields(PipelineConfig)}
    for name in getattr(args, "ablate", []) or []:
        pipe[ABLATIONS[name]] = False
    oracle_keys = ("backend", "targets", "mode", "noise_radius", "seed", "context_text",
                   "endpoint", "model", "temperature", "timeout")
    orc = {k: getattr(args, k, None) for k in oracle_keys}
    orc.update(extra_oracle or {})
    if args.config is not None and not args.config.is_file():
        raise UsageError(f"config file not found: {args.config}")
    settings = load_settings(args.config, pipeline_overrides=pipe, oracle_overrides=orc,
                             focal_length_px=args.focal_px, clearance_radius_m=args.clearance_m)
    if settings.oracle.backend == "http" and not (settings.oracle.endpoint or os.environ.get(ENDPOINT_ENV)):
        raise UsageError("endpoint not configured")
    return settings


def _require_file(path: Path | None, what: str) -> None:
    if path is not None and not path.is_file():
        raise UsageError(f"{what} not found: {path}")


def _run_prediction(image_path: Path, depth_path: Path | None, settings: Settings, oracle=None):
    image = load_rgb(image_path)
    depth = load_depth(depth_path) if depth_path is not None else None
    h, w = image.shape[:2]
    if oracle is None:
        oracle = make_oracle(settings.oracle, default_target=Point(w / 2, h / 2))
    try:
        return image, predict_grasp(image, oracle, settings.pipeline, depth, settings.intrinsics, settings.gripper)
    finally:
        oracle.close()


def _write_outputs(args, image, result, settings: Settings) -> None:
    text = result.to_json()
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if getattr(args, "overlay_out", None) is not None:
        from .viz import draw_result

        save_rgb(args.overlay_out, draw_result(image, result, settings.focal_length_px, settings.clearance_radius_m))


# ---------------------------------------------------------------------------
# subcommands


def cmd_predict(args: argparse.Namespace) -> int:
    _require_file(args.image, "image")
    _require_file(args.depth, "depth map")
    extra = {"transcript": str(args.transcript)} if args.transcript else {}
    settings = _settings_from_args(args, extra)
    if args.server:
        return _predict_remote(args, settings)
    image, result = _run_prediction(args.image, args.depth, settings)
    _write_outputs(args, image, result, settings)
    if args.save_transcript:
        write_transcript(args.save_transcript, result.transcript)
    return EXIT_OK


def _predict_remote(args: argparse.Namespace, settings: Settings) -> int:
    import httpx

    body: dict[str, Any] = {
        "image_png_b64": base64.b64encode(args.image.read_bytes()).decode("ascii"),
        "pipeline": settings.pipeline.to_dict(),
        "focal_length_px": settings.focal_length_px,
        "clearance_radius_m": settings.clearance_radius_m,
        "oracle": {k: v for k, v in dataclasses.asdict(settings.oracle).items() if k != "transcript"},
    }
    if args.depth is not None:
        body["depth_png_b64"] = base64.b64encode(args.depth.read_bytes()).decode("ascii")
    try:
        resp = httpx.post(args.server.rstrip("/") + "/v1/predict", json=body, timeout=600)
    except httpx.HTTPError as exc:
        raise OracleError(f"server unreachable: {exc}") from exc
    if resp.status_code != 200:
        raise PipelineError(f"server error {resp.status_code}: {resp.text}")
    text = json.dumps(resp.json()["result"], sort_keys=True, indent=2) + "\n"
    if args.out is not None:
        args.out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _meta_path(transcript: Path) -> Path:
    return transcript.with_name(transcript.name + ".meta.json")


def cmd_record(args: argparse.Namespace) -> int:
    _require_file(args.image, "image")
    _require_file(args.depth, "depth map")
    settings = _settings_from_args(args)
    if settings.oracle.backend == "replay":
        raise UsageError("record wraps a live or scripted oracle, not a replay")
    image, result = _run_prediction(args.image, args.depth, settings)
    write_transcript(args.transcript, result.transcript)
    meta = {
        "config_digest": settings.digest(),
        "image_digest": image_digest(args.image.read_bytes()),
        "depth_digest": image_digest(args.depth.read_bytes()) if args.depth else None,
        "oracle": settings.oracle.backend,
        "result_json": result.to_json(),
    }
    _meta_path(args.transcript).write_text(canonical_json(meta), encoding="utf-8")
    _write_outputs(args, image, result, settings)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    _require_file(args.image, "image")
    _require_file(args.depth, "depth map")
    _require_file(args.transcript, "transcript")
    meta_path = _meta_path(args.transcript)
    _require_file(meta_path, "transcript metadata")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    settings = _settings_from_args(args, {"backend": "replay", "transcript": str(args.transcript)})
    if settings.digest() != meta["config_digest"]:
        _fail("config digest mismatch", "ReplayError")
        return EXIT_RUNTIME
    if image_digest(args.image.read_bytes()) != meta["image_digest"]:
        _fail("image digest mismatch", "ReplayError")
        return EXIT_RUNTIME
    oracle = ReplayOracle(read_transcript(args.transcript))
    image, result = _run_prediction(args.image, args.depth, settings, oracle)
    _write_outputs(args, image, result, settings)
    if result.to_json() != meta["result_json"]:
        _fail("replayed result differs from the recording", "ReplayError")
        return EXIT_RUNTIME
    if oracle.remaining:
        _fail(f"{oracle.remaining} recorded exchanges were not replayed", "ReplayError")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_batch_eval(args: argparse.Namespace) -> int:
    _require_file(args.manifest, "manifest")
    settings = _settings_from_args(args)
    if settings.oracle.backend == "replay":
        raise UsageError("batch-eval does not support the replay oracle")
    manifest = load_manifest(args.manifest)
    missing = [e.id for e in manifest.entries if e.annotation is None]
    if missing:
        raise UsageError(f"manifest entries without annotations: {', '.join(missing)}")
    annotations = {e.id: load_annotation(e.annotation) for e in manifest.entries}

    def run(index: int):
        entry = manifest.entries[index]
        ann = annotations[entry.id]
        orc = dataclasses.replace(settings.oracle, seed=settings.oracle.seed + index)
        oracle = make_oracle(orc, default_target=ann.grasps[0].position)
        _, result = _run_prediction(entry.image, entry.depth, settings, oracle)
        if args.results_dir is not None:
            args.results_dir.mkdir(parents=True, exist_ok=True)
            (args.results_dir / f"{entry.id}.json").write_text(result.to_json(), encoding="utf-8")
        pose = result.pose
        return evaluate_image(entry.id, Point(float(pose.x), float(pose.y)), pose.theta_deg, ann,
                              result.diagnostics.get("depth_refinement_enabled"))

    outcomes: list[Any] = [None] * len(manifest.entries)
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        futures = [pool.submit(run, i) for i in range(len(manifest.entries))]
        for i, fut in enumerate(futures):
            try:
                outcomes[i] = fut.result()
            except (PipelineError, OracleError, LoadError, ValueError) as exc:
                outcomes[i] = exc
    rows = [o for o in outcomes if not isinstance(o, Exception)]
    failures = {manifest.entries[i].id: str(o) for i, o in enumerate(outcomes) if isinstance(o, Exception)}
    report = EvalReport(rows, failures, settings={
        "ablations": sorted(set(args.ablate or [])),
        "oracle": settings.oracle.backend,
        "config_digest": settings.digest(),
        "depth_refinement": settings.pipeline.use_depth_refinement,
        "orientation_refinement": settings.pipeline.use_orientation_refinement,
        "scene_context": settings.pipeline.use_scp,
        "explanation": settings.pipeline.use_explanation,
    })
    if args.out is not None:
        args.out.write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(report.to_table())
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    if args.scene not in SCENES:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {', '.join(SCENES)}")
    manifest = write_scenes(args.out_dir, args.scene, args.seed, args.count, args.angle)
    for e in manifest.entries:
        print(e.image)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oracle-grasp", description="Zero-shot grasp prediction with a multimodal oracle.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="predict a grasp for one image")
    p.add_argument("image", type=Path, help="RGB PNG")
    p.add_argument("--depth", type=Path, default=None, help="16-bit depth PNG in millimeters")
    p.add_argument("--transcript", type=Path, default=None, help="transcript to answer from (--oracle replay)")
    p.add_argument("--save-transcript", type=Path, default=None, help="write the oracle transcript here")
    p.add_argument("--out", type=Path, default=None, help="result JSON path (default: stdout)")
    p.add_argument("--overlay-out", type=Path, default=None, help="write an annotated PNG here")
    p.add_argument("--server", default=None, help="send the request to a running service instead")
    _add_common(p)
    _add_oracle_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("batch-eval", help="predict and score every entry of a dataset manifest")
    p.add_argument("manifest", type=Path, help="dataset manifest JSON")
    p.add_argument("--out", type=Path, default=None, help="report JSON path")
    p.add_argument("--results-dir", type=Path, default=None, help="also write each GraspResult here")
    p.add_argument("--jobs", type=int, default=1, help="images processed concurrently")
    _add_common(p)
    _add_oracle_flags(p, ("scripted", "http"))
    p.set_defaults(func=cmd_batch_eval)

    p = sub.add_parser("record", help="predict and persist the oracle transcript for replay")
    p.add_argument("image", type=Path, help="RGB PNG")
    p.add_argument("--transcript", type=Path, required=True, help="transcript JSONL to write")
    p.add_argument("--depth", type=Path, default=None, help="16-bit depth PNG in millimeters")
    p.add_argument("--out", type=Path, default=None, help="result JSON path (default: stdout)")
    p.add_argument("--overlay-out", type=Path, default=None, help="write an annotated PNG here")
    _add_common(p)
    _add_oracle_flags(p, ("scripted", "http"))
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("replay", help="re-run a recorded prediction and verify it is identical")
    p.add_argument("image", type=Path, help="the recorded RGB PNG")
    p.add_argument("--transcript", type=Path, required=True, help="transcript JSONL from `record`")
    p.add_argument("--depth", type=Path, default=None, help="the recorded depth PNG, if any")
    p.add_argument("--out", type=Path, default=None, help="result JSON path (default: stdout)")
    p.add_argument("--overlay-out", type=Path, default=None, help="write an annotated PNG here")
    _add_common(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("synth", help="write seeded synthetic RGB-D fixtures with annotations")
    p.add_argument("--scene", default="handle-hole", help=f"one of: {', '.join(SCENES)}")
    p.add_argument("--seed", type=int, default=0, help="seed of the first scene (default: 0)")
    p.add_argument("--count", type=int, default=1, help="number of scenes, seeded seed..seed+count-1 (default: 1)")
    p.add_argument("--angle", type=float, default=None, help="bar angle in degrees (bar scene)")
    p.add_argument("--out-dir", type=Path, default=Path("synth"), help="output directory (default: synth)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("serve", help="run the HTTP prediction service")
    p.add_argument("--host", default="127.0.0.1", help="bind address (default: 127.0.0.1)")
    p.add_argument("--port", type=int, default=8000, help="port (default: 8000)")
    p.set_defaults(func=cmd_serve)
    return parser


def _fail(message: str, kind: str) -> None:
    sys.stderr.write(json.dumps({"error": message, "type": kind}) + "\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _fail(str(exc), "UsageError")
        return EXIT_USAGE
    except (ConfigError, LoadError) as exc:
        _fail(str(exc), type(exc).__name__)
        return EXIT_USAGE
    except (PipelineError, OracleError) as exc:
        _fail(str(exc), type(exc).__name__)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
