"""End-to-end command line tests, run in process via main(argv).

Each command writes machine output to files (or stdout for tables and
reports) and keeps diagnostics on stderr, so the tests assert on exit
codes, file bytes, and parsed output.
"""

import json
import socket

import pytest

from handlift.cli import build_parser, main, resolve_run_config
from handlift.io_formats import (
    load_annotations,
    load_calibration,
    load_detections,
    load_eval_report,
    load_manifest,
)
from handlift.search import CD, TM, SearchConfig

SYNTH_FRAMES = 6


@pytest.fixture
def dataset(tmp_path):
    root = tmp_path / "data"
    rc = main(["synth", "--out", str(root), "--frames", str(SYNTH_FRAMES),
               "--seed", "5"])
    assert rc == 0
    return root


def manifest_path(root):
    return str(root / "manifest.json")


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_dataset(dataset):
    manifest = load_manifest(manifest_path(dataset))
    cams = load_calibration(manifest.calibration)
    assert len(cams) == 8
    frames = list(load_detections(manifest.detection_sets["default"]))
    assert len(frames) == SYNTH_FRAMES
    gt = load_annotations(manifest.ground_truth)
    assert len(gt) == SYNTH_FRAMES
    assert all(len(f.hands) == 2 for f in gt)


def test_synth_deterministic_bytes(tmp_path):
    args = ["synth", "--frames", "4", "--seed", "9", "--pixel-sigma", "1.5",
            "--p-miss", "0.2"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    for name in ("manifest.json", "calib.json", "gt.jsonl",
                 "dets/default.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# ---------------------------------------------------------------------------
# annotate


def test_annotate_writes_outputs(dataset, tmp_path):
    out = tmp_path / "run"
    rc = main(["annotate", "--manifest", manifest_path(dataset),
               "--out", str(out)])
    assert rc == 0
    anns = load_annotations(out / "annotations.jsonl")
    assert len(anns) == SYNTH_FRAMES
    summary = json.loads((out / "summary.json").read_text())
    assert summary["frames"] == SYNTH_FRAMES
    assert summary["track_births"] >= 2


def test_annotate_byte_identical_reruns(dataset, tmp_path):
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = main(["annotate", "--manifest", manifest_path(dataset),
                   "--out", str(out), "--mode", "TM", "--criterion", "CD"])
        assert rc == 0
        outs.append(out)
    for name in ("annotations.jsonl", "summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_annotate_bad_calibration_path(dataset, tmp_path, capsys):
    doc = json.loads((dataset / "manifest.json").read_text())
    doc["calibration"] = "nope.json"
    broken = dataset / "broken.json"
    broken.write_text(json.dumps(doc))
    rc = main(["annotate", "--manifest", str(broken),
               "--out", str(tmp_path / "x")])
    assert rc != 0
    assert "nope.json" in capsys.readouterr().err


def test_annotate_unknown_detection_set(dataset, tmp_path, capsys):
    rc = main(["annotate", "--manifest", manifest_path(dataset),
               "--detections", "alt", "--out", str(tmp_path / "x")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "alt" in err and "default" in err


# ---------------------------------------------------------------------------
# config precedence


def test_config_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(
        {"delta_default": 0.08, "mode": "TM", "criterion": "CD"}))
    ns = build_parser().parse_args(
        ["annotate", "--manifest", manifest_path(dataset),
         "--config", str(cfg), "--delta-default", "0.09"])
    run = resolve_run_config(ns)
    assert run.search.mode == TM
    assert run.search.criterion == CD
    assert run.search.delta_default == 0.09
    assert run.search.delta_min == SearchConfig().delta_min


def test_config_unknown_key_rejected(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"delta_defualt": 0.08}))
    rc = main(["annotate", "--manifest", manifest_path(dataset),
               "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "delta_defualt" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_gt_against_itself(dataset, tmp_path):
    gt = str(load_manifest(manifest_path(dataset)).ground_truth)
    report_path = tmp_path / "report.json"
    rc = main(["evaluate", "--pred", gt, "--gt", gt,
               "--out", str(report_path)])
    assert rc == 0
    report = load_eval_report(report_path)
    assert report.mpjpe_mm == 0.0
    assert report.pck_auc == 1.0
    assert report.track_acc == 1.0
    assert report.skipped_frames == 0


def test_evaluate_prints_report_without_out(dataset, capsys):
    gt = str(load_manifest(manifest_path(dataset)).ground_truth)
    rc = main(["evaluate", "--pred", gt, "--gt", gt])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["mpjpe_mm"] == 0.0
    assert doc["frames"] == SYNTH_FRAMES


def test_evaluate_gt_from_manifest(dataset, capsys):
    gt = str(load_manifest(manifest_path(dataset)).ground_truth)
    rc = main(["evaluate", "--pred", gt,
               "--manifest", manifest_path(dataset)])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["pck_auc"] == 1.0


# ---------------------------------------------------------------------------
# ablate


ROW_ORDER = [("DM", "NS"), ("DM", "CD"), ("DM", "REPR"),
             ("TM", "NS"), ("TM", "CD"), ("TM", "REPR")]


def test_ablate_table_and_csv(dataset, tmp_path, capsys):
    out = tmp_path / "ab"
    rc = main(["ablate", "--manifest", manifest_path(dataset),
               "--out", str(out)])
    assert rc == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.strip()]
    assert len(lines) == 7
    header = lines[0].split()
    assert header[:2] == ["mode", "criterion"]
    assert [tuple(ln.split()[:2]) for ln in lines[1:]] == ROW_ORDER

    csv_lines = (out / "ablation.csv").read_text().splitlines()
    assert len(csv_lines) == 7
    assert csv_lines[0] == "mode,criterion,mpjpe_mm,pck_auc,skipped_frames,track_acc"
    for (mode, criterion), line in zip(ROW_ORDER, csv_lines[1:]):
        cells = line.split(",")
        assert cells[0] == mode and cells[1] == criterion
        assert float(cells[2]) < 1e-4  # zero-noise input lifts exactly
        assert float(cells[3]) == 1.0
        assert int(cells[4]) >= 0
        assert 0.0 <= float(cells[5]) <= 1.0


def test_ablate_deterministic_csv(dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["ablate", "--manifest", manifest_path(dataset),
                     "--out", str(out)]) == 0
        outs.append(out / "ablation.csv")
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_ablate_requires_ground_truth(dataset, tmp_path, capsys):
    doc = json.loads((dataset / "manifest.json").read_text())
    doc["ground_truth"] = None
    nogt = dataset / "nogt.json"
    nogt.write_text(json.dumps(doc))
    rc = main(["ablate", "--manifest", str(nogt), "--out", str(tmp_path)])
    assert rc == 1
    assert "ground truth" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# serve


def test_serve_occupied_port(dataset, capsys):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    try:
        rc = main(["serve", "--manifest", manifest_path(dataset),
                   "--port", str(port)])
    finally:
        sock.close()
    assert rc == 1
    assert str(port) in capsys.readouterr().err
