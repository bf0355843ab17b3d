"""Synthetic multi-camera hand scenes with exact ground truth.

Cameras sit on a ring aimed at the origin; hands are a rigid 21-joint
flat-hand template (about 18 cm wrist to middle fingertip) carried along
a scripted trajectory with small per-finger articulation sinusoids. The
detection renderer projects ground truth into every camera and corrupts
it with a parametric noise model, so every downstream claim can be
checked against known geometry.

Conventions baked in here and relied on by tests:
  - hand i is a right hand when i is even, a left hand when i is odd;
  - a joint is visible in a camera iff its exact projection has depth
    > 0.2 m and lands inside the image (inclusive bounds);
  - invisible joints are emitted as pixel (0, 0) with confidence 0;
  - a hand with no visible joints produces no detection at all;
  - noise draws for hand number h in camera c happen in a fixed order
    regardless of parameter values, so runs that share a seed share the
    underlying randomness (raising p_miss only removes detections,
    scaling pixel_sigma only scales the same offsets).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .clustering import FUSED, LEFT, RIGHT, HandEstimate
from .errors import ConfigError
from .geometry import CameraModel, Detection2D, project_points
from .pipeline import FrameAnnotation, FrameInput

LINEAR = "LINEAR"
ORBIT = "ORBIT"
HANDOVER = "HANDOVER"
_TRAJECTORIES = (LINEAR, ORBIT, HANDOVER)

_MIN_DEPTH = 0.2
_BBOX_PAD = 5.0


@dataclass(frozen=True)
class SceneSpec:
    n_cameras: int = 8
    rig_radius: float = 1.5
    rig_height: float = 1.0
    n_hands: int = 2
    trajectory: str = ORBIT
    duration_frames: int = 100
    fps: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.n_cameras < 2:
            raise ConfigError("n_cameras must be at least 2")
        if self.rig_radius <= 0.0:
            raise ConfigError("rig_radius must be positive")
        if not 1 <= self.n_hands <= 4:
            raise ConfigError("n_hands must be between 1 and 4")
        if self.trajectory not in _TRAJECTORIES:
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.trajectory == HANDOVER and self.n_hands < 2:
            raise ConfigError("HANDOVER needs at least 2 hands")
        if self.duration_frames < 1:
            raise ConfigError("duration_frames must be at least 1")
        if self.fps <= 0.0:
            raise ConfigError("fps must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    p_miss: float = 0.0
    p_false_positive: float = 0.0
    p_side_flip: float = 0.0
    conf_lo: float = 0.75
    conf_hi: float = 1.0
    side_strength: float = 0.9

    def __post_init__(self):
        if self.pixel_sigma < 0.0:
            raise ConfigError("pixel_sigma must be non-negative")
        for name in ("p_miss", "p_side_flip"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.p_false_positive < 0.0:
            raise ConfigError("p_false_positive must be non-negative")
        if not 0.0 <= self.conf_lo <= self.conf_hi <= 1.0:
            raise ConfigError("need 0 <= conf_lo <= conf_hi <= 1")
        if not 0.5 <= self.side_strength <= 1.0:
            raise ConfigError("side_strength must lie in [0.5, 1]")


# ---------------------------------------------------------------------------
# Hand template

# (fan angle degrees, wrist-to-base distance, three segment lengths);
# joint 0 is the wrist, each finger contributes 4 joints in chain order.
_FINGERS = (
    (55.0, 0.035, (0.032, 0.025, 0.022)),   # thumb
    (18.0, 0.095, (0.036, 0.022, 0.019)),   # index
    (2.0, 0.098, (0.040, 0.026, 0.020)),    # middle
    (-14.0, 0.092, (0.037, 0.024, 0.019)),  # ring
    (-30.0, 0.082, (0.028, 0.018, 0.016)),  # pinky
)


def _hand_template():
    joints = np.zeros((21, 3))
    idx = 1
    for angle, base_dist, segments in _FINGERS:
        rad = math.radians(angle)
        direction = np.array([math.cos(rad), math.sin(rad), 0.0])
        reach = base_dist
        for seg in (0.0,) + segments:
            reach += seg
            joints[idx] = direction * reach
            idx += 1
    return joints


_RIGHT_TEMPLATE = _hand_template()
_LEFT_TEMPLATE = _RIGHT_TEMPLATE * np.array([1.0, -1.0, 1.0])


def is_right_hand(hand_index):
    return hand_index % 2 == 0


def _articulate(template, amps, freqs, phases, t):
    """Hinge each finger's distal joints about its base joint."""
    joints = template.copy()
    for f in range(5):
        base = 1 + 4 * f
        direction = template[base + 1] - template[base]
        direction = direction / np.linalg.norm(direction)
        axis = np.cross(direction, np.array([0.0, 0.0, 1.0]))
        axis = axis / np.linalg.norm(axis)
        angle = amps[f] * math.sin(2.0 * math.pi * freqs[f] * t + phases[f])
        rot = Rotation.from_rotvec(axis * angle).as_matrix()
        chain = joints[base + 1:base + 4] - joints[base]
        joints[base + 1:base + 4] = chain @ rot.T + joints[base]
    return joints


# ---------------------------------------------------------------------------
# Trajectories


def _hand_pose(spec, hand, frame):
    """World placement (position, rotation) of a hand's wrist at a frame."""
    s = frame / spec.duration_frames
    if spec.trajectory == LINEAR:
        pos = np.array([-0.35 + 0.7 * s, -0.3 + 0.2 * hand, 0.05 * (hand % 2)])
        return pos, np.eye(3)
    if spec.trajectory == ORBIT:
        radius = 0.25 + 0.12 * hand
        theta = 2.0 * math.pi * hand / spec.n_hands + math.pi * s
        pos = np.array([
            radius * math.cos(theta),
            radius * math.sin(theta),
            0.08 * math.sin(2.0 * math.pi * s + theta),
        ])
        rot = Rotation.from_euler("z", theta + math.pi / 2.0).as_matrix()
        return pos, rot
    # HANDOVER: hands 0 and 1 meet near the origin mid-sequence; any
    # further hands run side lanes. Hand 1 is flipped palm-over so the
    # two shapes coincide up to translation at the closest pass.
    approach = 1.0 - abs(2.0 * s - 1.0)
    if hand == 0:
        return np.array([-0.40 + 0.39 * approach, 0.0, 0.0]), np.eye(3)
    if hand == 1:
        rot = Rotation.from_euler("x", math.pi).as_matrix()
        return np.array([0.40 - 0.39 * approach, 0.0, 0.0]), rot
    lane = 0.45 if hand == 2 else -0.45
    return np.array([-0.2 + 0.4 * s, lane, 0.0]), np.eye(3)


# ---------------------------------------------------------------------------
# Cameras


def _look_at_extrinsic(position, target, up=(0.0, 0.0, 1.0)):
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    ext = np.eye(4)
    ext[:3, :3] = np.stack([x, y, z])
    ext[:3, 3] = -ext[:3, :3] @ position
    return ext


def _ring_cameras(spec):
    cams = {}
    for k in range(spec.n_cameras):
        ang = 2.0 * math.pi * k / spec.n_cameras
        pos = (
            spec.rig_radius * math.cos(ang),
            spec.rig_radius * math.sin(ang),
            spec.rig_height,
        )
        cid = f"cam{k}"
        cams[cid] = CameraModel(
            id=cid, fx=1100.0, fy=1100.0, cx=960.0, cy=540.0,
            extrinsic=_look_at_extrinsic(pos, (0.0, 0.0, 0.0)),
            image_width=1920, image_height=1080,
        )
    return cams


# ---------------------------------------------------------------------------
# Generation


def generate_scene(spec):
    """Ground-truth joint positions per frame plus the camera rig.

    Returns (gt, cameras) where gt[frame][hand] is a (21, 3) array and
    cameras maps camera_id to CameraModel. Output is a pure function of
    the spec; each frame is computed independently.
    """
    rng = np.random.default_rng([spec.seed, 0])
    amps = rng.uniform(0.06, 0.14, (spec.n_hands, 5))
    freqs = rng.uniform(0.15, 0.45, (spec.n_hands, 5))
    phases = rng.uniform(0.0, 2.0 * math.pi, (spec.n_hands, 5))
    templates = [
        _RIGHT_TEMPLATE if is_right_hand(i) else _LEFT_TEMPLATE
        for i in range(spec.n_hands)
    ]
    gt = []
    for frame in range(spec.duration_frames):
        t = frame / spec.fps
        hands = []
        for i in range(spec.n_hands):
            joints = _articulate(templates[i], amps[i], freqs[i], phases[i], t)
            pos, rot = _hand_pose(spec, i, frame)
            hands.append(joints @ rot.T + pos)
        gt.append(hands)
    return gt, _ring_cameras(spec)


def _visibility(camera, joints):
    uv, _ = project_points(camera, joints)
    pc = joints @ camera.extrinsic[:3, :3].T + camera.extrinsic[:3, 3]
    visible = (
        (pc[:, 2] > _MIN_DEPTH)
        & (uv[:, 0] >= 0.0) & (uv[:, 0] <= camera.image_width)
        & (uv[:, 1] >= 0.0) & (uv[:, 1] <= camera.image_height)
    )
    return uv, visible


def _finish_detection(camera_id, uv, visible, conf, side_prob, det_conf):
    kps = uv.copy()
    kps[~visible] = 0.0
    conf = np.where(visible, conf, 0.0)
    seen = kps[visible]
    x0, y0 = seen.min(axis=0) - _BBOX_PAD
    x1, y1 = seen.max(axis=0) + _BBOX_PAD
    return Detection2D(
        camera_id=camera_id, keypoints=kps, keypoint_conf=conf,
        bbox=(x0, y0, x1 - x0, y1 - y0),
        side_prob=float(side_prob), det_conf=float(det_conf),
    )


def gt_annotations(gt):
    """Wrap raw ground-truth poses as annotation frames for file export.

    Hand index doubles as track id, so a ground-truth file evaluates
    cleanly against itself and against pipeline output.
    """
    frames = []
    for frame_index, hands in enumerate(gt):
        estimates = [
            HandEstimate(
                pose=np.array(pose, dtype=np.float64),
                side=RIGHT if is_right_hand(h) else LEFT,
                side_confidence=1.0,
                track_id=h,
                contributing=frozenset(),
                status=FUSED,
            )
            for h, pose in enumerate(hands)
        ]
        frames.append(FrameAnnotation(
            frame_index=frame_index, hands=estimates,
            accepted_threshold=0.0, skipped=set(), manual_overrides=[],
        ))
    return frames


def render_detections(gt, cameras, noise, seed, fps=20.0):
    """Project ground truth into every camera under the noise model.

    Returns one FrameInput per ground-truth frame. Deterministic in
    seed; frames draw from independent streams and can be rendered in
    any order. False positives are perturbed copies of real hands moved
    by a random image-space offset, drawn from a stream of their own so
    they never shift the per-hand draws.
    """
    frames = []
    for frame_index, hands in enumerate(gt):
        rng = np.random.default_rng([seed, 1, frame_index])
        fp_rng = np.random.default_rng([seed, 2, frame_index])
        detections = {}
        for cid, camera in cameras.items():
            dets = []
            hand_uvs = []
            hand_vis = []
            for h, joints in enumerate(hands):
                uv, visible = _visibility(camera, joints)
                hand_uvs.append(uv)
                hand_vis.append(visible)
                # fixed draw order, unconditionally consumed (see module
                # docstring)
                offsets = rng.standard_normal((joints.shape[0], 2))
                u_miss = rng.uniform()
                u_flip = rng.uniform()
                conf = rng.uniform(noise.conf_lo, noise.conf_hi, joints.shape[0])
                det_conf = rng.uniform(noise.conf_lo, noise.conf_hi)
                if u_miss < noise.p_miss or not visible.any():
                    continue
                side = (noise.side_strength if is_right_hand(h)
                        else 1.0 - noise.side_strength)
                if u_flip < noise.p_side_flip:
                    side = 1.0 - side
                dets.append(_finish_detection(
                    cid, uv + noise.pixel_sigma * offsets, visible, conf,
                    side, det_conf))
            for _ in range(fp_rng.poisson(noise.p_false_positive)):
                if not hands:
                    break
                src = int(fp_rng.integers(len(hands)))
                shift = fp_rng.uniform(-0.25, 0.25, 2) * (
                    camera.image_width, camera.image_height)
                offsets = fp_rng.standard_normal((21, 2))
                conf = fp_rng.uniform(noise.conf_lo, noise.conf_hi, 21)
                det_conf = fp_rng.uniform(noise.conf_lo, noise.conf_hi)
                side = fp_rng.uniform(0.05, 0.95)
                if not hand_vis[src].any():
                    continue
                dets.append(_finish_detection(
                    cid, hand_uvs[src] + shift + noise.pixel_sigma * offsets,
                    hand_vis[src], conf, side, det_conf))
            detections[cid] = dets
        frames.append(FrameInput(
            frame_index=frame_index,
            timestamp=frame_index / fps,
            detections=detections,
        ))
    return frames
