"""Command line entry points.

Subcommands:
  annotate  batch-annotate a sequence named by its manifest
  evaluate  score an annotation file against ground truth
  synth     generate a synthetic dataset directory
  ablate    run all six mode/criterion combinations and tabulate
  serve     host the interactive annotation service

Machine-readable output goes to files, or to stdout when no --out is
given; diagnostics stay on stderr. Flag values resolve with precedence
command line > --config file > built-in defaults. Exit status is 0 only
when the command succeeded.
"""

import argparse
import json
import socket
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError, HandLiftError
from .io_formats import (
    Manifest,
    eval_report_doc,
    load_annotations,
    load_calibration,
    load_detections,
    load_ground_truth,
    load_manifest,
    save_calibration,
    save_detections,
    save_eval_report,
    save_manifest,
    write_annotations,
)
from .metrics import evaluate
from .pipeline import annotate_sequence
from .search import AUTO, CD, DM, NS, REPR, TM, SearchConfig
from .synth import (
    HANDOVER,
    LINEAR,
    ORBIT,
    NoiseSpec,
    SceneSpec,
    generate_scene,
    gt_annotations,
    render_detections,
)

_SEARCH_FIELDS = tuple(f.name for f in fields(SearchConfig))
_SCENE_FIELDS = tuple(f.name for f in fields(SceneSpec))
_NOISE_FIELDS = tuple(f.name for f in fields(NoiseSpec))
_COMMON_KEYS = ("manifest", "detections", "out", "seed", "tau", "port", "host")

ABLATION_ROWS = (
    (DM, NS), (DM, CD), (DM, REPR),
    (TM, NS), (TM, CD), (TM, REPR),
)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved invocation: search parameters plus run plumbing."""

    search: SearchConfig
    manifest: str | None
    detections: str
    out: str | None
    seed: int
    tau: float


def _load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = set(_SEARCH_FIELDS) | set(_SCENE_FIELDS) | set(_NOISE_FIELDS) \
        | set(_COMMON_KEYS)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return doc


def _pick(ns, doc, name, default=None):
    """Precedence: command line > config file > given default."""
    value = getattr(ns, name, None)
    if value is not None:
        return value
    if name in doc:
        return doc[name]
    return default


def resolve_run_config(ns) -> RunConfig:
    doc = _load_config_file(ns.config) if getattr(ns, "config", None) else {}
    values = {}
    for name in _SEARCH_FIELDS:
        value = _pick(ns, doc, name)
        if value is not None:
            values[name] = value
    if isinstance(values.get("expected_hands"), str) \
            and values["expected_hands"] != AUTO:
        values["expected_hands"] = int(values["expected_hands"])
    return RunConfig(
        search=SearchConfig(**values),
        manifest=_pick(ns, doc, "manifest"),
        detections=_pick(ns, doc, "detections", "default"),
        out=_pick(ns, doc, "out"),
        seed=int(_pick(ns, doc, "seed", 0)),
        tau=float(_pick(ns, doc, "tau", 0.01)),
    )


def _require_manifest(run) -> Manifest:
    if not run.manifest:
        raise ConfigError("a manifest path is required")
    return load_manifest(run.manifest)


def _detection_path(manifest, name):
    if name not in manifest.detection_sets:
        available = sorted(manifest.detection_sets)
        raise ConfigError(
            f"no detection set {name!r} in manifest; available: {available}")
    return manifest.detection_sets[name]


def _write_doc(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def _log(message):
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_annotate(ns) -> int:
    run = resolve_run_config(ns)
    manifest = _require_manifest(run)
    cameras = load_calibration(manifest.calibration)
    frames = load_detections(_detection_path(manifest, run.detections))
    annotations, summary = annotate_sequence(run.search, cameras, frames)

    out = _ensure_dir(run.out or ".")
    ann_path = out / "annotations.jsonl"
    write_annotations(annotations, ann_path)
    _write_doc({
        "frames": summary.frames,
        "track_births": summary.track_births,
        "track_retirements": summary.track_retirements,
        "skipped_total": summary.skipped_total,
        "per_track_skipped": {
            str(tid): int(summary.per_track_skipped[tid])
            for tid in sorted(summary.per_track_skipped)
        },
        "mean_accepted_threshold": float(summary.mean_accepted_threshold),
    }, out / "summary.json")
    _log(f"wrote {ann_path}")
    return 0


def cmd_evaluate(ns) -> int:
    run = resolve_run_config(ns)
    pred = load_annotations(ns.pred)
    if ns.gt:
        gt_path = ns.gt
    else:
        manifest = _require_manifest(run)
        if manifest.ground_truth is None:
            raise ConfigError("manifest has no ground truth file")
        gt_path = manifest.ground_truth
    report = evaluate(load_ground_truth(gt_path), pred, tau=run.tau)
    if run.out:
        save_eval_report(report, run.out)
        _log(f"wrote {run.out}")
    else:
        print(json.dumps(eval_report_doc(report), indent=2))
    return 0


def cmd_synth(ns) -> int:
    run = resolve_run_config(ns)
    doc = _load_config_file(ns.config) if ns.config else {}
    scene_spec = SceneSpec(
        n_cameras=int(_pick(ns, doc, "n_cameras", 8)),
        rig_radius=float(_pick(ns, doc, "rig_radius", 1.5)),
        rig_height=float(_pick(ns, doc, "rig_height", 1.0)),
        n_hands=int(_pick(ns, doc, "n_hands", 2)),
        trajectory=str(_pick(ns, doc, "trajectory", ORBIT)),
        duration_frames=int(_pick(ns, doc, "duration_frames", 100)),
        fps=float(_pick(ns, doc, "fps", 20.0)),
        seed=run.seed,
    )
    noise = NoiseSpec(
        pixel_sigma=float(_pick(ns, doc, "pixel_sigma", 0.0)),
        p_miss=float(_pick(ns, doc, "p_miss", 0.0)),
        p_false_positive=float(_pick(ns, doc, "p_false_positive", 0.0)),
        p_side_flip=float(_pick(ns, doc, "p_side_flip", 0.0)),
        conf_lo=float(_pick(ns, doc, "conf_lo", 0.75)),
        conf_hi=float(_pick(ns, doc, "conf_hi", 1.0)),
        side_strength=float(_pick(ns, doc, "side_strength", 0.9)),
    )
    if not run.out:
        raise ConfigError("synth requires --out DIR")
    out = _ensure_dir(run.out)
    (out / "dets").mkdir(exist_ok=True)

    gt, cameras = generate_scene(scene_spec)
    save_calibration(cameras, out / "calib.json")
    save_detections(
        render_detections(gt, cameras, noise, seed=run.seed,
                          fps=scene_spec.fps),
        out / "dets" / "default.jsonl")
    write_annotations(gt_annotations(gt), out / "gt.jsonl")
    save_manifest(Manifest(
        sequence_id=f"synth-{scene_spec.trajectory.lower()}-{run.seed}",
        fps=scene_spec.fps,
        calibration="calib.json",
        detection_sets={"default": "dets/default.jsonl"},
        ground_truth="gt.jsonl",
    ), out / "manifest.json")
    _log(f"wrote dataset under {out}")
    return 0


def cmd_ablate(ns) -> int:
    run = resolve_run_config(ns)
    manifest = _require_manifest(run)
    if manifest.ground_truth is None:
        raise ConfigError("ablate needs a manifest with a ground truth file")
    cameras = load_calibration(manifest.calibration)
    frames = list(load_detections(_detection_path(manifest, run.detections)))
    gt = load_ground_truth(manifest.ground_truth)

    def one(row):
        mode, criterion = row
        config = replace(run.search, mode=mode, criterion=criterion)
        annotations, _ = annotate_sequence(config, cameras, frames)
        return evaluate(gt, annotations, tau=run.tau)

    # the six runs share only read-only inputs
    with ThreadPoolExecutor(max_workers=len(ABLATION_ROWS)) as pool:
        reports = list(pool.map(one, ABLATION_ROWS))

    header = ("mode", "criterion", "mpjpe_mm", "pck_auc", "skipped_frames",
              "track_acc")
    cells = [
        (mode, criterion, f"{r.mpjpe_mm:.3f}", f"{r.pck_auc:.4f}",
         str(r.skipped_frames), f"{r.track_acc:.4f}")
        for (mode, criterion), r in zip(ABLATION_ROWS, reports)
    ]
    widths = [max(len(h), *(len(row[i]) for row in cells))
              for i, h in enumerate(header)]
    for row in (header, *cells):
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())

    out = _ensure_dir(run.out or ".")
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for (mode, criterion), r in zip(ABLATION_ROWS, reports):
            fh.write(",".join((
                mode, criterion, repr(float(r.mpjpe_mm)),
                repr(float(r.pck_auc)), str(r.skipped_frames),
                repr(float(r.track_acc)))) + "\n")
    _log(f"wrote {csv_path}")
    return 0


def cmd_serve(ns) -> int:
    run = resolve_run_config(ns)
    manifest = _require_manifest(run)
    doc = _load_config_file(ns.config) if ns.config else {}
    host = str(_pick(ns, doc, "host", "127.0.0.1"))
    port = int(_pick(ns, doc, "port", 8765))
    probe = socket.socket()
    try:
        probe.bind((host, port))
    except OSError as exc:
        raise ConfigError(
            f"cannot listen on {host}:{port} ({exc.strerror}); "
            "is the port already in use?") from exc
    finally:
        probe.close()

    import uvicorn

    from .service import create_app

    app = create_app(manifest, run.search, detections=run.detections)
    _log(f"serving {manifest.sequence_id} on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------
# parser


def _ensure_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with defaults for any flag")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output file or directory")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--mode", choices=(DM, TM))
    search.add_argument("--criterion", choices=(NS, CD, REPR))
    for flag in ("delta-default", "delta-min", "delta-max", "step",
                 "conf-cutoff"):
        search.add_argument(f"--{flag}", type=float,
                            dest=flag.replace("-", "_"))
    for flag in ("max-offsets", "cluster-size-min", "max-coast"):
        search.add_argument(f"--{flag}", type=int,
                            dest=flag.replace("-", "_"))
    search.add_argument("--expected-hands", dest="expected_hands",
                        help="hand count to cover, or AUTO")
    search.add_argument("--detections", help="detection set name")
    search.add_argument("--tau", type=float,
                        help="tracking gate in meters for evaluation")

    parser = argparse.ArgumentParser(
        prog="handlift",
        description="Multi-view hand lifting, clustering, and tracking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", parents=[common, search],
                       help="batch-annotate a sequence")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("evaluate", parents=[common, search],
                       help="score annotations against ground truth")
    p.add_argument("--pred", required=True, help="annotation file to score")
    p.add_argument("--gt", help="ground truth file (or use --manifest)")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset directory")
    p.add_argument("--cameras", type=int, dest="n_cameras")
    p.add_argument("--rig-radius", type=float, dest="rig_radius")
    p.add_argument("--rig-height", type=float, dest="rig_height")
    p.add_argument("--hands", type=int, dest="n_hands")
    p.add_argument("--trajectory", choices=(LINEAR, ORBIT, HANDOVER))
    p.add_argument("--frames", type=int, dest="duration_frames")
    p.add_argument("--fps", type=float)
    p.add_argument("--pixel-sigma", type=float, dest="pixel_sigma")
    p.add_argument("--p-miss", type=float, dest="p_miss")
    p.add_argument("--p-false-positive", type=float, dest="p_false_positive")
    p.add_argument("--p-side-flip", type=float, dest="p_side_flip")
    p.add_argument("--conf-lo", type=float, dest="conf_lo")
    p.add_argument("--conf-hi", type=float, dest="conf_hi")
    p.add_argument("--side-strength", type=float, dest="side_strength")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", parents=[common, search],
                       help="run all six mode/criterion combinations")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", parents=[common, search],
                       help="host the interactive annotation service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        return ns.func(ns)
    except HandLiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
