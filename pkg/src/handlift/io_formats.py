"""File formats for calibration, detections, annotations, manifests,
and evaluation reports.

Rules shared by every format here:
  - floats are written with the shortest round-trip repr, so loading a
    saved file restores each value bit for bit;
  - object keys, camera ids, and source lists are emitted in a fixed
    order, so saving the same data twice gives byte-identical files;
  - per-frame records use JSON Lines and are parsed one line at a time;
    single documents (calibration, manifest, report) are indented JSON;
  - a 3D joint with any non-finite component is stored as null;
  - malformed input raises FormatError naming the file and, for line
    formats, the offending line; detection streams whose frame indices
    go backwards raise OrderingError.

Out-of-range confidences in detection files are clamped to [0, 1] with
a warning rather than rejected, since upstream detectors routinely emit
values like 1.0000001.
"""

import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .clustering import CARRIED_FORWARD, HandEstimate
from .errors import FormatError, OrderingError
from .geometry import CameraModel, Detection2D
from .metrics import EvalReport
from .pipeline import REJECT, FrameAnnotation, FrameInput, Override

_CAMERA_FIELDS = ("id", "fx", "fy", "cx", "cy", "width", "height", "extrinsic")


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise FormatError(f"{where}: missing field {key!r}")
    return obj[key]


def _write_doc(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def _read_doc(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror}") from exc


def _dump_line(record):
    return json.dumps(record, separators=(",", ":"), allow_nan=False) + "\n"


def _read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(
                    f"{path} line {lineno}: invalid JSON ({exc.msg})") from exc


def _clamp01(value, what, where):
    value = float(value)
    if not math.isfinite(value):
        raise FormatError(f"{where}: {what} must be finite")
    if 0.0 <= value <= 1.0:
        return value
    clamped = min(max(value, 0.0), 1.0)
    warnings.warn(f"{where}: {what} {value!r} clamped to [0, 1]", stacklevel=2)
    return clamped


# ---------------------------------------------------------------------------
# calibration


def save_calibration(cameras, path):
    """Write {camera_id: CameraModel} as a single JSON document."""
    doc = {"cameras": [
        {
            "id": cam.id,
            "fx": float(cam.fx), "fy": float(cam.fy),
            "cx": float(cam.cx), "cy": float(cam.cy),
            "width": int(cam.image_width), "height": int(cam.image_height),
            "extrinsic": [float(v) for v in cam.extrinsic.reshape(-1)],
        }
        for cam in (cameras[cid] for cid in sorted(cameras))
    ]}
    _write_doc(doc, path)


def load_calibration(path):
    """Load a calibration file into {camera_id: CameraModel}.

    The extrinsic is 16 row-major floats (world-to-camera). Geometry
    problems (non-orthonormal rotation, reflection, bad last row) and
    schema problems both surface as FormatError.
    """
    doc = _read_doc(path)
    entries = _require(doc, "cameras", path)
    out = {}
    for i, rec in enumerate(entries):
        where = f"{path}: camera entry {i}"
        for key in _CAMERA_FIELDS:
            _require(rec, key, where)
        cid = str(rec["id"])
        where = f"{path}: camera {cid!r}"
        for key in ("fx", "fy"):
            if not float(rec[key]) > 0.0:
                raise FormatError(f"{where}: field {key!r} must be positive")
        ext = rec["extrinsic"]
        if not isinstance(ext, list) or len(ext) != 16:
            raise FormatError(f"{where}: extrinsic must hold 16 row-major values")
        try:
            cam = CameraModel(
                id=cid,
                fx=float(rec["fx"]), fy=float(rec["fy"]),
                cx=float(rec["cx"]), cy=float(rec["cy"]),
                extrinsic=np.array(ext, dtype=np.float64).reshape(4, 4),
                image_width=int(rec["width"]),
                image_height=int(rec["height"]),
            )
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if cid in out:
            raise FormatError(f"{path}: duplicate camera id {cid!r}")
        out[cid] = cam
    return out


# ---------------------------------------------------------------------------
# detection streams


def save_detections(frames, path):
    """Write an iterable of FrameInput as JSON Lines, one frame per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for frame in frames:
            cams = {}
            for cid in sorted(frame.detections):
                dets = []
                for det in frame.detections[cid]:
                    if det is None:
                        raise FormatError(
                            "cannot serialize a rejected detection slot")
                    dets.append({
                        "bbox": [float(v) for v in det.bbox],
                        "kps": [
                            [float(u), float(v), float(c)]
                            for (u, v), c in zip(det.keypoints,
                                                 det.keypoint_conf)
                        ],
                        "side": float(det.side_prob),
                        "conf": float(det.det_conf),
                    })
                cams[cid] = dets
            fh.write(_dump_line({
                "frame": int(frame.frame_index),
                "time": float(frame.timestamp),
                "cams": cams,
            }))


def _parse_detection(camera_id, rec, where):
    raw = _require(rec, "kps", where)
    kps, conf = [], []
    for j, entry in enumerate(raw):
        if not isinstance(entry, list) or len(entry) != 3:
            raise FormatError(f"{where}: keypoint {j} must be [u, v, conf]")
        kps.append((float(entry[0]), float(entry[1])))
        conf.append(_clamp01(entry[2], f"keypoint {j} confidence", where))
    bbox = _require(rec, "bbox", where)
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise FormatError(f"{where}: bbox must be [x, y, w, h]")
    try:
        return Detection2D(
            camera_id=camera_id,
            keypoints=np.array(kps, dtype=np.float64),
            keypoint_conf=np.array(conf, dtype=np.float64),
            bbox=tuple(float(v) for v in bbox),
            side_prob=_clamp01(_require(rec, "side", where),
                               "side probability", where),
            det_conf=_clamp01(_require(rec, "conf", where),
                              "detection confidence", where),
        )
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def load_detections(path):
    """Stream FrameInput records from a JSON Lines detection file.

    Yields frames lazily; indices must be non-decreasing.
    """
    last = None
    for lineno, rec in _read_lines(path):
        where = f"{path} line {lineno}"
        frame = int(_require(rec, "frame", where))
        if last is not None and frame < last:
            raise OrderingError(
                f"{where}: frame {frame} appears after frame {last}")
        last = frame
        detections = {
            str(cid): [_parse_detection(str(cid), d, where) for d in dets]
            for cid, dets in _require(rec, "cams", where).items()
        }
        yield FrameInput(
            frame_index=frame,
            timestamp=float(_require(rec, "time", where)),
            detections=detections,
        )


# ---------------------------------------------------------------------------
# annotation streams (predictions and ground truth share this schema)


def annotation_record(ann):
    """FrameAnnotation as the plain dict written to annotation files."""
    hands = []
    for est in ann.hands:
        rec = {
            "track": int(est.track_id),
            "side": est.side,
            "side_conf": float(est.side_confidence),
            "status": est.status,
            "joints": [
                [float(v) for v in row]
                if np.all(np.isfinite(row)) else None
                for row in est.pose
            ],
            "sources": [[cid, int(idx)]
                        for cid, idx in sorted(est.contributing)],
        }
        if est.interpolated_joints:
            rec["interp"] = sorted(int(j) for j in est.interpolated_joints)
        hands.append(rec)
    record = {
        "frame": int(ann.frame_index),
        "threshold": float(ann.accepted_threshold),
        "hands": hands,
    }
    if ann.manual_overrides:
        record["overrides"] = [
            {
                "camera": o.camera_id,
                "index": int(o.detection_index),
                "track": REJECT if o.track_id == REJECT else int(o.track_id),
            }
            for o in ann.manual_overrides
        ]
    return record


def write_annotations(annotations, path):
    """Write an iterable of FrameAnnotation as JSON Lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(_dump_line(annotation_record(ann)))


def _parse_hand(rec, where):
    rows = []
    for j, entry in enumerate(_require(rec, "joints", where)):
        if entry is None:
            rows.append((math.nan, math.nan, math.nan))
            continue
        if not isinstance(entry, list) or len(entry) != 3:
            raise FormatError(f"{where}: joint {j} must be [x, y, z] or null")
        row = tuple(float(v) for v in entry)
        if not all(math.isfinite(v) for v in row):
            raise FormatError(f"{where}: joint {j} must be finite or null")
        rows.append(row)
    return HandEstimate(
        pose=np.array(rows, dtype=np.float64),
        side=str(_require(rec, "side", where)),
        side_confidence=float(_require(rec, "side_conf", where)),
        track_id=int(_require(rec, "track", where)),
        contributing=frozenset(
            (str(cid), int(idx)) for cid, idx in rec.get("sources", [])),
        status=str(_require(rec, "status", where)),
        interpolated_joints=frozenset(int(j) for j in rec.get("interp", [])),
    )


def load_annotations(path):
    """Load a JSON Lines annotation file into FrameAnnotation records.

    The per-frame skipped set is not stored; it is rebuilt from the
    carried-forward statuses.
    """
    out = []
    for lineno, rec in _read_lines(path):
        where = f"{path} line {lineno}"
        frame = int(_require(rec, "frame", where))
        hands = [_parse_hand(h, where) for h in _require(rec, "hands", where)]
        overrides = [
            Override(
                frame_index=frame,
                camera_id=str(_require(o, "camera", where)),
                detection_index=int(_require(o, "index", where)),
                track_id=REJECT if _require(o, "track", where) == REJECT
                else int(o["track"]),
            )
            for o in rec.get("overrides", [])
        ]
        out.append(FrameAnnotation(
            frame_index=frame,
            hands=hands,
            accepted_threshold=float(_require(rec, "threshold", where)),
            skipped={h.track_id for h in hands
                     if h.status == CARRIED_FORWARD},
            manual_overrides=overrides,
        ))
    return out


def load_ground_truth(path):
    """Load a ground-truth file; same schema as annotations."""
    return load_annotations(path)


# ---------------------------------------------------------------------------
# evaluation reports


def eval_report_doc(report):
    """EvalReport as the plain dict that save_eval_report writes."""
    return {
        "mpjpe_mm": float(report.mpjpe_mm),
        "pck_auc": float(report.pck_auc),
        "track_acc": float(report.track_acc),
        "skipped_frames": int(report.skipped_frames),
        "matched_pairs": int(report.matched_pairs),
        "frames": int(report.frames),
        "per_track_skipped": {
            str(tid): int(report.per_track_skipped[tid])
            for tid in sorted(report.per_track_skipped)
        },
    }


def save_eval_report(report, path):
    _write_doc(eval_report_doc(report), path)


def load_eval_report(path):
    doc = _read_doc(path)
    return EvalReport(
        mpjpe_mm=float(_require(doc, "mpjpe_mm", path)),
        pck_auc=float(_require(doc, "pck_auc", path)),
        track_acc=float(_require(doc, "track_acc", path)),
        skipped_frames=int(_require(doc, "skipped_frames", path)),
        per_track_skipped={
            int(k): int(v)
            for k, v in _require(doc, "per_track_skipped", path).items()
        },
        matched_pairs=int(_require(doc, "matched_pairs", path)),
        frames=int(_require(doc, "frames", path)),
    )


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class Manifest:
    """Names the files of one recorded sequence.

    Paths are stored relative to the manifest; load_manifest returns
    them resolved. detection_sets maps a label (e.g. a detector name)
    to one detection stream covering all cameras.
    """

    sequence_id: str
    fps: float
    calibration: str
    detection_sets: dict
    ground_truth: str | None = None


def save_manifest(manifest, path):
    doc = {
        "sequence": manifest.sequence_id,
        "fps": float(manifest.fps),
        "calibration": manifest.calibration,
        "detection_sets": {
            name: manifest.detection_sets[name]
            for name in sorted(manifest.detection_sets)
        },
        "ground_truth": manifest.ground_truth,
    }
    _write_doc(doc, path)


def load_manifest(path):
    """Load a manifest, resolving paths and checking the files exist.

    The calibration file is parsed eagerly (it is small and everything
    depends on it); detection streams stay lazy.
    """
    doc = _read_doc(path)
    root = os.path.dirname(os.path.abspath(path))

    def resolve(rel, what):
        full = os.path.normpath(os.path.join(root, rel))
        if not os.path.isfile(full):
            raise FormatError(f"{path}: {what} file not found: {rel}")
        return full

    sets = _require(doc, "detection_sets", path)
    if not isinstance(sets, dict) or not sets:
        raise FormatError(f"{path}: detection_sets must name at least one file")
    gt = doc.get("ground_truth")
    manifest = Manifest(
        sequence_id=str(_require(doc, "sequence", path)),
        fps=float(_require(doc, "fps", path)),
        calibration=resolve(str(_require(doc, "calibration", path)),
                            "calibration"),
        detection_sets={
            str(name): resolve(str(rel), f"detection set {name!r}")
            for name, rel in sets.items()
        },
        ground_truth=None if gt is None else resolve(str(gt), "ground truth"),
    )
    load_calibration(manifest.calibration)
    return manifest
