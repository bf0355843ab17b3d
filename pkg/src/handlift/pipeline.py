"""Sequence-level annotation driver.

Folds per-frame detection input through proposal building, clustering,
threshold search, fallback, and fusion, maintaining hand tracks across
frames. This is the engine behind both the CLI batch path and the
interactive service.

Track identity rules:
  - ids are monotonically increasing integers assigned at spawn and
    never reused;
  - a session with no live tracks bootstraps by clustering at the
    default radius and spawning a track per three-camera cluster,
    whatever the configured mode (tracking needs seeds to exist first);
  - afterwards, unassigned three-camera clusters spawn new tracks and
    tracks that missed more than max_coast consecutive frames retire.

Manual overrides are hard constraints staged on the session and applied
to the frame whose index they name: a forced pair pins a detection's
cluster to a track before assignment, a REJECT removes the detection
from the frame entirely.
"""

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import CARRIED_FORWARD, FUSED, HandEstimate, TrackState
from .errors import ConfigError, OverrideError
from .search import DM, FrameContext, SearchConfig, fallback, run_criterion

REJECT = "REJECT"
HISTORY_LIMIT = 600


@dataclass(eq=False)
class FrameInput:
    """Detections for one synchronized multi-camera frame.

    detections maps camera_id to the list of Detection2D seen by that
    camera; cameras with no detections may be present with an empty list
    or absent entirely.
    """

    frame_index: int
    timestamp: float
    detections: dict

    def __post_init__(self):
        if self.frame_index < 0:
            raise ConfigError("frame_index must be non-negative")


@dataclass(frozen=True)
class Override:
    """One staged manual constraint: pin a detection to a track, or
    REJECT the detection outright."""

    frame_index: int
    camera_id: str
    detection_index: int
    track_id: object

    def forces(self) -> bool:
        return self.track_id != REJECT


@dataclass(eq=False)
class FrameAnnotation:
    frame_index: int
    hands: list
    accepted_threshold: float
    skipped: set
    manual_overrides: list


@dataclass(eq=False)
class SessionState:
    """Mutable per-sequence state; annotate_frame updates it in place
    and returns it."""

    cameras: dict
    config: SearchConfig
    tracks: list = field(default_factory=list)
    camera_mask: set = field(default_factory=set)
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_LIMIT))
    last_accepted: float | None = None
    next_track_id: int = 0
    pending_overrides: list = field(default_factory=list)

    def __post_init__(self):
        if self.last_accepted is None:
            self.last_accepted = self.config.delta_default

    def live_track_ids(self):
        return {t.track_id for t in self.tracks}


@dataclass(frozen=True)
class SequenceSummary:
    frames: int
    track_births: int
    track_retirements: int
    skipped_total: int
    per_track_skipped: dict
    mean_accepted_threshold: float


def apply_manual_override(state: SessionState, override: Override):
    """Stage a constraint for the frame it names.

    Track references are validated against live tracks now; detection
    existence can only be checked once the frame arrives.
    """
    if override.camera_id not in state.cameras:
        raise OverrideError(f"unknown camera {override.camera_id!r}")
    if override.camera_id in state.camera_mask:
        raise OverrideError(f"camera {override.camera_id!r} is rejected")
    if override.detection_index < 0:
        raise OverrideError("detection_index must be non-negative")
    if override.forces() and override.track_id not in state.live_track_ids():
        raise OverrideError(f"unknown track {override.track_id!r}")
    slot = (override.camera_id, override.detection_index)
    for staged in state.pending_overrides:
        if staged.frame_index != override.frame_index:
            continue
        if staged == override:
            return state
        if (staged.camera_id, staged.detection_index) == slot:
            raise OverrideError(
                f"detection {slot} already constrained for frame "
                f"{override.frame_index}")
        if (staged.forces() and override.forces()
                and staged.track_id == override.track_id):
            raise OverrideError(
                f"track {override.track_id} already forced for frame "
                f"{override.frame_index}")
    state.pending_overrides.append(override)
    return state


def _consume_overrides(state, frame, pool):
    """Split this frame's staged overrides into rejects (applied to the
    pool as None slots) and a forced {track_id: (camera_id, index)} map."""
    applied = [ov for ov in state.pending_overrides
               if ov.frame_index == frame.frame_index]
    state.pending_overrides = [ov for ov in state.pending_overrides
                               if ov.frame_index > frame.frame_index]
    live = state.live_track_ids()
    for ov in applied:
        dets = pool.get(ov.camera_id)
        if dets is None or not 0 <= ov.detection_index < len(dets) \
                or dets[ov.detection_index] is None:
            raise OverrideError(
                f"frame {frame.frame_index} has no detection "
                f"({ov.camera_id}, {ov.detection_index})")
        if ov.forces() and ov.track_id not in live:
            raise OverrideError(f"unknown track {ov.track_id!r}")
    forced = {}
    for ov in applied:
        if not ov.forces():
            pool[ov.camera_id][ov.detection_index] = None
    for ov in applied:
        if ov.forces():
            forced[ov.track_id] = (ov.camera_id, ov.detection_index)
    return forced, applied


def _fill_missing_joints(pose, previous):
    """Joints unresolved in every view inherit the track's previous
    position, shifted by the mean displacement of the joints both poses
    share. Returns the set of joint indices filled that way."""
    missing = ~np.isfinite(pose).all(axis=1)
    usable = np.isfinite(previous).all(axis=1)
    fill = missing & usable
    if not fill.any():
        return frozenset()
    common = ~missing & usable
    shift = (pose[common] - previous[common]).mean(axis=0) if common.any() \
        else np.zeros(3)
    pose[fill] = previous[fill] + shift
    return frozenset(int(j) for j in np.nonzero(fill)[0])


def annotate_frame(state: SessionState, frame: FrameInput):
    """Annotate one frame and advance the session. Returns
    (FrameAnnotation, state); state is mutated in place."""
    unknown = sorted(set(frame.detections) - set(state.cameras))
    if unknown:
        raise ConfigError(
            f"frame {frame.frame_index} references uncalibrated cameras "
            f"{unknown}")
    bad_mask = state.camera_mask - set(state.cameras)
    if bad_mask:
        raise ConfigError(f"camera_mask names unknown cameras {sorted(bad_mask)}")
    pool = {cid: list(dets) for cid, dets in frame.detections.items()
            if cid not in state.camera_mask}
    forced, applied = _consume_overrides(state, frame, pool)

    if not state.tracks:
        # no seeds exist yet, so run one three-camera clustering pass at
        # the default radius whatever the configured mode
        config = state.config if state.config.mode == DM \
            else replace(state.config, mode=DM)
        ctx = FrameContext(state.cameras, pool, [], config)
        accepted = config.delta_default
        per_hand = {}
        carried, retired = {}, set()
        new_clusters = [c for c in ctx.clusters_at(accepted) if c.dm_valid()]
    else:
        ctx = FrameContext(state.cameras, pool, state.tracks, state.config,
                           forced=forced)
        selection = run_criterion(ctx, state.last_accepted)
        carried, retired = fallback(state.tracks, selection, state.config)
        accepted = selection.accepted_threshold
        per_hand = selection.per_hand
        new_clusters = selection.new_clusters

    track_map = {t.track_id: t for t in state.tracks}
    estimates = []
    for tid, cluster in per_hand.items():
        if cluster is None:
            continue
        proto = ctx.fused(cluster)
        track = track_map[tid]
        if proto is None:
            # selected but unfusable; treat as a miss
            if track.frames_since_update + 1 > state.config.max_coast:
                retired.add(tid)
            else:
                carried[tid] = HandEstimate(
                    pose=track.last_pose.copy(), side=track.side,
                    side_confidence=track.side_confidence, track_id=tid,
                    contributing=frozenset(), status=CARRIED_FORWARD)
            continue
        pose = proto.pose.copy()
        interpolated = _fill_missing_joints(pose, track.last_pose)
        estimates.append(HandEstimate(
            pose=pose, side=proto.side,
            side_confidence=proto.side_confidence, track_id=tid,
            contributing=proto.contributing, status=FUSED,
            interpolated_joints=interpolated))

    skipped = set(carried)
    estimates.extend(carried.values())

    for est in estimates:
        track = track_map.get(est.track_id)
        if track is None:
            continue
        if est.status == FUSED:
            track.last_pose = est.pose.copy()
            track.last_threshold = accepted
            track.frames_since_update = 0
            track.side = est.side
            track.side_confidence = est.side_confidence
        else:
            track.frames_since_update += 1
    state.tracks = [t for t in state.tracks if t.track_id not in retired]

    for cluster in new_clusters:
        proto = ctx.fused(cluster)
        if proto is None:
            continue
        tid = state.next_track_id
        state.next_track_id += 1
        est = HandEstimate(
            pose=proto.pose.copy(), side=proto.side,
            side_confidence=proto.side_confidence, track_id=tid,
            contributing=proto.contributing, status=FUSED)
        estimates.append(est)
        state.tracks.append(TrackState(
            track_id=tid, last_pose=est.pose.copy(), last_threshold=accepted,
            frames_since_update=0, side=est.side,
            side_confidence=est.side_confidence))

    state.last_accepted = accepted
    annotation = FrameAnnotation(
        frame_index=frame.frame_index,
        hands=sorted(estimates, key=lambda e: e.track_id),
        accepted_threshold=accepted,
        skipped=skipped,
        manual_overrides=applied,
    )
    state.history.append(annotation)
    return annotation, state


def annotate_sequence(config: SearchConfig, cameras: dict, frames):
    """Fold annotate_frame over a detection stream.

    Returns (annotations, SequenceSummary). The stream must be non-empty
    with strictly increasing frame indices.
    """
    state = SessionState(cameras=dict(cameras), config=config)
    annotations = []
    last_index = None
    for frame in frames:
        if last_index is not None and frame.frame_index <= last_index:
            raise ConfigError(
                f"frame indices must be strictly increasing "
                f"(got {frame.frame_index} after {last_index})")
        last_index = frame.frame_index
        annotation, state = annotate_frame(state, frame)
        annotations.append(annotation)
    if not annotations:
        raise ConfigError("empty detection stream")
    per_track = {}
    for annotation in annotations:
        for tid in annotation.skipped:
            per_track[tid] = per_track.get(tid, 0) + 1
    return annotations, SequenceSummary(
        frames=len(annotations),
        track_births=state.next_track_id,
        track_retirements=state.next_track_id - len(state.tracks),
        skipped_total=sum(per_track.values()),
        per_track_skipped=per_track,
        mean_accepted_threshold=float(np.mean(
            [a.accepted_threshold for a in annotations])),
    )
