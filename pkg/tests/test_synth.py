"""Tests for the synthetic scene generator.

The generator is itself the oracle for the rest of the suite, so these
tests lean on geometry (already validated against independent oracles)
and on closed-form expectations: ring placement, template metrics,
trajectory bounds, and noise statistics with known distributions.
"""

import numpy as np
import pytest

from handlift.clustering import pose_distance
from handlift.errors import ConfigError
from handlift.geometry import project, project_points, triangulate_weighted_joints
from handlift.synth import (
    HANDOVER,
    LINEAR,
    ORBIT,
    NoiseSpec,
    SceneSpec,
    generate_scene,
    render_detections,
)


def exact_uv(cam, joints):
    uv, _ = project_points(cam, joints)
    return uv


def depths(cam, joints):
    pc = joints @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    return pc[:, 2]


# ---------------------------------------------------------------------------
# Rig and spec


def test_ring_rig_geometry():
    spec = SceneSpec(n_hands=1, trajectory=LINEAR, duration_frames=1, seed=3)
    _, cams = generate_scene(spec)
    assert len(cams) == 8
    assert sorted(cams) == sorted(set(cams))
    expected_dist = np.hypot(spec.rig_radius, spec.rig_height)
    angles = []
    for cam in cams.values():
        assert np.isclose(np.linalg.norm(cam.center), expected_dist)
        assert np.isclose(cam.center[2], spec.rig_height)
        # every camera is aimed at the origin
        u, v = project(cam, np.zeros(3))
        assert abs(u - cam.cx) < 1e-6 and abs(v - cam.cy) < 1e-6
        angles.append(np.arctan2(cam.center[1], cam.center[0]))
    gaps = np.diff(np.sort(angles))
    assert np.allclose(gaps, 2.0 * np.pi / 8.0, atol=1e-9)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(n_cameras=1)
    with pytest.raises(ConfigError):
        SceneSpec(duration_frames=0)
    with pytest.raises(ConfigError):
        SceneSpec(n_hands=0)
    with pytest.raises(ConfigError):
        SceneSpec(n_hands=5)
    with pytest.raises(ConfigError):
        SceneSpec(trajectory="SPIRAL")
    with pytest.raises(ConfigError):
        SceneSpec(trajectory=HANDOVER, n_hands=1)
    with pytest.raises(ConfigError):
        NoiseSpec(pixel_sigma=-0.1)
    with pytest.raises(ConfigError):
        NoiseSpec(p_miss=1.5)
    with pytest.raises(ConfigError):
        NoiseSpec(p_side_flip=-0.2)
    with pytest.raises(ConfigError):
        NoiseSpec(conf_lo=0.9, conf_hi=0.2)


def test_default_spec_matches_rig_contract():
    spec = SceneSpec()
    assert spec.n_cameras == 8
    assert spec.rig_radius == 1.5
    assert spec.rig_height == 1.0
    assert spec.fps == 20.0


# ---------------------------------------------------------------------------
# Ground truth


def test_hand_template_span():
    spec = SceneSpec(n_hands=1, trajectory=LINEAR, duration_frames=40, seed=11)
    gt, _ = generate_scene(spec)
    assert len(gt) == 40
    for frame in gt:
        assert len(frame) == 1
        joints = frame[0]
        assert joints.shape == (21, 3)
        assert np.all(np.isfinite(joints))
        span = max(
            np.linalg.norm(joints[a] - joints[b])
            for a in range(21)
            for b in range(a + 1, 21)
        )
        assert 0.12 < span < 0.26


def test_scene_determinism():
    spec = SceneSpec(n_hands=3, trajectory=ORBIT, duration_frames=25, seed=77)
    gt_a, cams_a = generate_scene(spec)
    gt_b, cams_b = generate_scene(spec)
    assert list(cams_a) == list(cams_b)
    for fa, fb in zip(gt_a, gt_b):
        for ja, jb in zip(fa, fb):
            assert np.array_equal(ja, jb)


def test_orbit_wrists_stay_near_center():
    spec = SceneSpec(n_hands=4, trajectory=ORBIT, duration_frames=120, seed=5)
    gt, _ = generate_scene(spec)
    for frame in gt:
        for joints in frame:
            assert np.linalg.norm(joints[0]) <= spec.rig_radius / 2.0


def test_handover_reaches_close_pass():
    spec = SceneSpec(n_hands=2, trajectory=HANDOVER, duration_frames=101, seed=9)
    gt, _ = generate_scene(spec)
    gaps = [pose_distance(frame[0], frame[1]) for frame in gt]
    assert gaps[0] > 0.3
    assert min(gaps) < 0.06
    assert gaps[-1] > 0.3


# ---------------------------------------------------------------------------
# Detection rendering


def test_zero_noise_projections_are_exact():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=10, seed=21)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(), seed=21)
    assert len(frames) == len(gt)
    for k, frame in enumerate(frames):
        assert frame.frame_index == k
        assert frame.timestamp == k / spec.fps
        for cid, dets in frame.detections.items():
            assert len(dets) == 2
            for h, det in enumerate(dets):
                assert np.all(det.keypoint_conf > 0.0)
                assert np.allclose(det.keypoints, exact_uv(cams[cid], gt[k][h]),
                                   atol=1e-9)
                # hand 0 is a right hand, hand 1 a left hand
                assert det.side_prob == (0.9 if h == 0 else pytest.approx(0.1))


def test_zero_noise_retriangulates_to_gt():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=6, seed=4)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(), seed=4)
    order = list(cams)
    projs = np.stack([cams[c].projection for c in order])
    for k, frame in enumerate(frames):
        for h in range(2):
            pixels = np.stack([frame.detections[c][h].keypoints for c in order])
            weights = np.stack([frame.detections[c][h].keypoint_conf for c in order])
            fused = triangulate_weighted_joints(projs, pixels, weights)
            assert np.all(np.linalg.norm(fused - gt[k][h], axis=1) < 1e-7)


def test_render_determinism():
    spec = SceneSpec(n_hands=2, trajectory=HANDOVER, duration_frames=12, seed=8)
    gt, cams = generate_scene(spec)
    noise = NoiseSpec(pixel_sigma=1.5, p_miss=0.2, p_false_positive=0.4,
                      p_side_flip=0.1)
    fa = render_detections(gt, cams, noise, seed=15)
    fb = render_detections(gt, cams, noise, seed=15)
    for a, b in zip(fa, fb):
        assert a.frame_index == b.frame_index and a.timestamp == b.timestamp
        assert list(a.detections) == list(b.detections)
        for cid in a.detections:
            da, db = a.detections[cid], b.detections[cid]
            assert len(da) == len(db)
            for x, y in zip(da, db):
                assert np.array_equal(x.keypoints, y.keypoints)
                assert np.array_equal(x.keypoint_conf, y.keypoint_conf)
                assert x.bbox == y.bbox
                assert x.side_prob == y.side_prob and x.det_conf == y.det_conf


def test_pixel_noise_magnitude():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=30, seed=2)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(pixel_sigma=2.0), seed=2)
    errs = []
    for k, frame in enumerate(frames):
        for cid, dets in frame.detections.items():
            for h, det in enumerate(dets):
                errs.append(np.linalg.norm(
                    det.keypoints - exact_uv(cams[cid], gt[k][h]), axis=1))
    mean = float(np.mean(np.concatenate(errs)))
    # 2D isotropic gaussian: E|n| = sigma * sqrt(pi / 2)
    assert abs(mean - 2.0 * np.sqrt(np.pi / 2.0)) < 0.25


def test_sigma_scales_shared_noise_draws():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=8, seed=6)
    gt, cams = generate_scene(spec)
    f1 = render_detections(gt, cams, NoiseSpec(pixel_sigma=1.0), seed=30)
    f2 = render_detections(gt, cams, NoiseSpec(pixel_sigma=2.0), seed=30)
    for k in range(len(gt)):
        for cid in cams:
            for h in range(2):
                base = exact_uv(cams[cid], gt[k][h])
                off1 = f1[k].detections[cid][h].keypoints - base
                off2 = f2[k].detections[cid][h].keypoints - base
                assert np.allclose(off2, 2.0 * off1, atol=1e-9)


def test_triangulation_error_under_noise():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=24, seed=13)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(pixel_sigma=2.0), seed=13)
    order = list(cams)
    projs = np.stack([cams[c].projection for c in order])
    errs = []
    for k, frame in enumerate(frames):
        for h in range(2):
            pixels = np.stack([frame.detections[c][h].keypoints for c in order])
            weights = np.stack([frame.detections[c][h].keypoint_conf for c in order])
            fused = triangulate_weighted_joints(projs, pixels, weights)
            errs.append(np.linalg.norm(fused - gt[k][h], axis=1))
    errs = np.concatenate(errs)
    assert errs.size >= 1000
    assert float(errs.mean()) < 0.010


def test_p_miss_rate_and_common_draws():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=200, seed=17)
    gt, cams = generate_scene(spec)
    lo = render_detections(gt, cams, NoiseSpec(pixel_sigma=1.0, p_miss=0.3), seed=40)
    hi = render_detections(gt, cams, NoiseSpec(pixel_sigma=1.0, p_miss=0.6), seed=40)
    kept = sum(len(d) for f in lo for d in f.detections.values())
    total = 200 * len(cams) * 2
    assert 0.26 < 1.0 - kept / total < 0.34
    for fl, fh in zip(lo, hi):
        for cid in cams:
            # raising p_miss only removes detections, never alters survivors
            low_kps = {d.keypoints.tobytes() for d in fl.detections[cid]}
            assert len(fh.detections[cid]) <= len(fl.detections[cid])
            for det in fh.detections[cid]:
                assert det.keypoints.tobytes() in low_kps


def test_p_miss_one_drops_everything():
    spec = SceneSpec(n_hands=2, trajectory=LINEAR, duration_frames=5, seed=1)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(p_miss=1.0), seed=1)
    assert all(not dets for f in frames for dets in f.detections.values())


def test_false_positive_rate():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=300, seed=23)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(p_false_positive=0.7), seed=23)
    extras = []
    for frame in frames:
        for dets in frame.detections.values():
            assert len(dets) >= 2
            extras.append(len(dets) - 2)
    mean = float(np.mean(extras))
    assert 0.6 < mean < 0.8


def test_side_flip():
    spec = SceneSpec(n_hands=2, trajectory=ORBIT, duration_frames=4, seed=31)
    gt, cams = generate_scene(spec)
    flipped = render_detections(gt, cams, NoiseSpec(p_side_flip=1.0), seed=31)
    for frame in flipped:
        for dets in frame.detections.values():
            assert dets[0].side_prob == pytest.approx(0.1)
            assert dets[1].side_prob == pytest.approx(0.9)


def test_visibility_convention_in_tight_rig():
    spec = SceneSpec(n_cameras=2, rig_radius=0.4, rig_height=0.0, n_hands=1,
                     trajectory=LINEAR, duration_frames=60, seed=19)
    gt, cams = generate_scene(spec)
    frames = render_detections(gt, cams, NoiseSpec(), seed=19)
    saw_partial = saw_empty = False
    for k, frame in enumerate(frames):
        for cid, dets in frame.detections.items():
            cam = cams[cid]
            if not dets:
                saw_empty = True
                continue
            det = dets[0]
            z = depths(cam, gt[k][0])
            uv = exact_uv(cam, gt[k][0])
            inside = (
                (z > 0.2)
                & (uv[:, 0] >= 0.0) & (uv[:, 0] <= cam.image_width)
                & (uv[:, 1] >= 0.0) & (uv[:, 1] <= cam.image_height)
            )
            if not inside.all():
                saw_partial = True
            for j in range(21):
                if inside[j]:
                    assert det.keypoint_conf[j] > 0.0
                else:
                    assert det.keypoint_conf[j] == 0.0
                    assert det.keypoints[j, 0] == 0.0 and det.keypoints[j, 1] == 0.0
    assert saw_partial and saw_empty
