"""Evaluation of predicted hand sequences against ground truth.

All operations accept two aligned sequences. Ground truth may be given
as per-frame lists of (J, 3) arrays (hand identity = list position) or
as FrameAnnotation objects (identity = track_id); predictions likewise.
Identity correspondence between the two is recovered per frame by
Hungarian matching on mean per-joint distance, gated at 0.25 m.

Tracking accuracy is a keypoint-level MOTA with a distance gate:
every finite ground-truth keypoint is one unit; a matched keypoint
within the gate is a true positive; keypoints of unmatched predicted
hands are false positives; when a ground-truth hand's matched track id
changes between consecutive matched frames, every finite keypoint of
that hand counts as one identity switch. Accuracy is
1 - (FN + FP + IDSW) / total, clamped to [0, 1].
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import FUSED, pose_distance
from .errors import ConfigError, EmptyEvaluation, Incomparable

MATCH_GATE = 0.25
PCK_STEPS = 100
PCK_MAX = 0.050

_FAR = 1e9


@dataclass(frozen=True)
class EvalReport:
    mpjpe_mm: float
    pck_auc: float
    track_acc: float
    skipped_frames: int
    per_track_skipped: dict
    matched_pairs: int
    frames: int


def _pose_frames(seq):
    """Normalize to per-frame lists of (pose, identity, status)."""
    out = []
    for frame in seq:
        if hasattr(frame, "hands"):
            out.append([
                (np.asarray(e.pose, dtype=np.float64), e.track_id, e.status)
                for e in frame.hands
            ])
        else:
            out.append([
                (np.asarray(p, dtype=np.float64), i, FUSED)
                for i, p in enumerate(frame)
            ])
    return out


def _paired(gt_seq, pred_seq):
    gt = _pose_frames(gt_seq)
    pred = _pose_frames(pred_seq)
    if len(gt) != len(pred):
        raise ConfigError(
            f"sequence lengths differ: {len(gt)} ground-truth frames vs "
            f"{len(pred)} predicted")
    return gt, pred


def match_hands(gt_hands, pred_hands, gate=MATCH_GATE):
    """One-to-one (gt_index, pred_index) pairs by Hungarian assignment
    on mean per-joint distance; pairs farther than the gate are
    dropped."""
    gt = [np.asarray(h, dtype=np.float64) for h in gt_hands]
    pred = [np.asarray(h, dtype=np.float64) for h in pred_hands]
    if not gt or not pred:
        return []
    cost = np.full((len(gt), len(pred)), _FAR)
    for g, gh in enumerate(gt):
        for p, ph in enumerate(pred):
            try:
                cost[g, p] = pose_distance(gh, ph)
            except Incomparable:
                pass
    rows, cols = linear_sum_assignment(cost)
    return [(int(g), int(p)) for g, p in zip(rows, cols) if cost[g, p] <= gate]


def _matched_joint_distances(gt_seq, pred_seq):
    """Distances (meters) of every matched joint finite in both poses,
    plus the number of matched hand pairs."""
    gt, pred = _paired(gt_seq, pred_seq)
    dists = []
    pairs = 0
    for gf, pf in zip(gt, pred):
        for g, p in match_hands([h for h, _, _ in gf], [h for h, _, _ in pf]):
            pairs += 1
            gh, ph = gf[g][0], pf[p][0]
            both = np.isfinite(gh).all(axis=1) & np.isfinite(ph).all(axis=1)
            if both.any():
                dists.append(np.linalg.norm(gh[both] - ph[both], axis=1))
    if not dists:
        raise EmptyEvaluation("no matched hands to evaluate")
    return np.concatenate(dists), pairs


def mpjpe(gt_seq, pred_seq) -> float:
    """Mean per-joint position error over matched hands, in mm."""
    dists, _ = _matched_joint_distances(gt_seq, pred_seq)
    return float(dists.mean() * 1000.0)


def pck_auc(gt_seq, pred_seq) -> float:
    """Mean fraction of matched joints within tau, over 100 uniform
    thresholds in (0, 50] mm."""
    dists, _ = _matched_joint_distances(gt_seq, pred_seq)
    taus = np.arange(1, PCK_STEPS + 1) * (PCK_MAX / PCK_STEPS)
    return float(np.mean([(dists <= t).mean() for t in taus]))


def tracking_accuracy(gt_seq, pred_seq, tau: float = 0.01) -> float:
    """Keypoint-level MOTA at gate tau (see module docstring)."""
    gt, pred = _paired(gt_seq, pred_seq)
    total = fn = fp = idsw = 0
    last_matched = {}
    for gf, pf in zip(gt, pred):
        finite_gt = [np.isfinite(h).all(axis=1) for h, _, _ in gf]
        total += int(sum(m.sum() for m in finite_gt))
        pairs = match_hands([h for h, _, _ in gf], [h for h, _, _ in pf])
        matched_g = {g for g, _ in pairs}
        matched_p = {p for _, p in pairs}
        for g, p in pairs:
            gh, gid, _ = gf[g]
            ph, pid, _ = pf[p]
            mask = finite_gt[g]
            both = mask & np.isfinite(ph).all(axis=1)
            tp = int((np.linalg.norm(gh[both] - ph[both], axis=1) <= tau).sum())
            fn += int(mask.sum()) - tp
            if gid in last_matched and last_matched[gid] != pid:
                idsw += int(mask.sum())
            last_matched[gid] = pid
        for g in range(len(gf)):
            if g not in matched_g:
                fn += int(finite_gt[g].sum())
        for p in range(len(pf)):
            if p not in matched_p:
                fp += int(np.isfinite(pf[p][0]).all(axis=1).sum())
    if total == 0:
        raise EmptyEvaluation("no ground-truth keypoints")
    return float(np.clip(1.0 - (fn + fp + idsw) / total, 0.0, 1.0))


def skipped_frames(pred_seq):
    """(total, per_track) counts of unannotated frames.

    A track is expected in every frame between its first and last
    appearance; an expected track that is absent or CARRIED_FORWARD
    skips that frame. The total counts frames where at least one
    expected track skipped.
    """
    frames = _pose_frames(pred_seq)
    lifespan = {}
    fused_at = {}
    for k, frame in enumerate(frames):
        for _, tid, status in frame:
            first, last = lifespan.get(tid, (k, k))
            lifespan[tid] = (min(first, k), max(last, k))
            if status == FUSED:
                fused_at.setdefault(tid, set()).add(k)
    per_track = {}
    frame_flags = [False] * len(frames)
    for tid, (first, last) in lifespan.items():
        ok = fused_at.get(tid, set())
        misses = [k for k in range(first, last + 1) if k not in ok]
        per_track[tid] = len(misses)
        for k in misses:
            frame_flags[k] = True
    return sum(frame_flags), per_track


def evaluate(gt_seq, pred_seq, tau: float = 0.01) -> EvalReport:
    """All metrics in one report."""
    dists, pairs = _matched_joint_distances(gt_seq, pred_seq)
    taus = np.arange(1, PCK_STEPS + 1) * (PCK_MAX / PCK_STEPS)
    total, per_track = skipped_frames(pred_seq)
    return EvalReport(
        mpjpe_mm=float(dists.mean() * 1000.0),
        pck_auc=float(np.mean([(dists <= t).mean() for t in taus])),
        track_acc=tracking_accuracy(gt_seq, pred_seq, tau),
        skipped_frames=total,
        per_track_skipped=per_track,
        matched_pairs=pairs,
        frames=len(gt_seq),
    )
