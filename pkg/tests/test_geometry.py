"""Geometry tests checked against independent numeric oracles.

The oracles here use a different solution path than the library:
projection goes through an explicit homogeneous 3x4 matrix, and
triangulation is a brute-force shrinking grid search over the same
least-squares objective. They share no code with handlift.geometry.
"""

import numpy as np
import pytest

from handlift.errors import (
    BehindCamera,
    CheiralityViolation,
    DegenerateGeometry,
    InsufficientViews,
)
from handlift.geometry import (
    CameraModel,
    Detection2D,
    project,
    reprojection_error,
    triangulate_multiview,
    triangulate_pair,
    triangulate_pairs_batch,
)


# ---------------------------------------------------------------------------
# camera construction helpers (local to the tests on purpose)

def look_at_extrinsic(position, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera transform for a camera at `position` looking at `target`.

    Convention: +z forward, +x right, +y down (so `up` maps to -y).
    """
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    ext = np.eye(4)
    ext[:3, :3] = np.stack([x, y, z])
    ext[:3, 3] = -ext[:3, :3] @ position
    return ext


def make_camera(cid, position, target=(0.0, 0.0, 0.0), fx=1100.0, fy=1100.0,
                cx=960.0, cy=540.0, width=1920, height=1080):
    return CameraModel(
        id=cid, fx=fx, fy=fy, cx=cx, cy=cy,
        extrinsic=look_at_extrinsic(position, target),
        image_width=width, image_height=height,
    )


def random_camera(rng, cid="cam"):
    # position on a sphere shell around the origin, always looking inward
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    position = direction * rng.uniform(1.0, 3.0)
    target = rng.normal(scale=0.05, size=3)
    return make_camera(
        cid, position, target,
        fx=rng.uniform(600.0, 1500.0), fy=rng.uniform(600.0, 1500.0),
        cx=rng.uniform(900.0, 1000.0), cy=rng.uniform(500.0, 580.0),
    )


def random_point_in_view(rng):
    # near the origin, which every random_camera looks at
    return rng.normal(scale=0.2, size=3)


# ---------------------------------------------------------------------------
# oracles

def oracle_projection_matrix(cam):
    K = np.array([
        [cam.fx, 0.0, cam.cx],
        [0.0, cam.fy, cam.cy],
        [0.0, 0.0, 1.0],
    ])
    return K @ cam.extrinsic[:3]


def oracle_project(cam, point):
    h = oracle_projection_matrix(cam) @ np.append(point, 1.0)
    return h[:2] / h[2]


def oracle_dlt_rows(cams, pixels, weights):
    rows = []
    for cam, pix, w in zip(cams, pixels, weights):
        P = oracle_projection_matrix(cam)
        for axis in (0, 1):
            r = pix[axis] * P[2] - P[axis]
            rows.append(w * r / np.linalg.norm(r))
    return np.array(rows)


def oracle_triangulate(cams, pixels, weights, init, span=0.3, iters=55, n=9):
    """Minimize the homogeneous least-squares objective by grid refinement.

    Objective: ||A x||^2 / ||x||^2 with x = (X, Y, Z, 1), the same quantity
    the DLT minimizes over unit vectors, restricted to finite points.
    """
    A = oracle_dlt_rows(cams, pixels, weights)
    center = np.asarray(init, dtype=np.float64)
    for _ in range(iters):
        g = np.linspace(-span, span, n)
        off = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = center + off
        x = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        num = np.einsum("rj,nj->nr", A, x)
        vals = (num ** 2).sum(axis=1) / (x ** 2).sum(axis=1)
        center = pts[int(np.argmin(vals))]
        span *= 0.6
    return center


def oracle_reprojection(joints, matched, cutoff=0.05):
    total = 0.0
    for cam, det in matched:
        R = cam.extrinsic[:3, :3]
        t = cam.extrinsic[:3, 3]
        for j in range(len(joints)):
            if det.keypoint_conf[j] < cutoff:
                continue
            if not np.all(np.isfinite(joints[j])):
                continue
            pc = R @ joints[j] + t
            if pc[2] <= 0.0:
                total += float(cam.image_width) ** 2 + float(cam.image_height) ** 2
                continue
            u = cam.fx * pc[0] / pc[2] + cam.cx
            v = cam.fy * pc[1] / pc[2] + cam.cy
            total += (u - det.keypoints[j][0]) ** 2 + (v - det.keypoints[j][1]) ** 2
    return total


def make_detection(cam, joints, rng=None, conf=None):
    pix = np.array([oracle_project(cam, j) for j in joints])
    if rng is not None:
        pix = pix + rng.normal(scale=1.0, size=pix.shape)
    kc = np.ones(len(joints)) if conf is None else np.asarray(conf, dtype=np.float64)
    return Detection2D(
        camera_id=cam.id, keypoints=pix, keypoint_conf=kc,
        bbox=(0.0, 0.0, 10.0, 10.0), side_prob=0.5, det_conf=1.0,
    )


# ---------------------------------------------------------------------------
# projection

def test_project_principal_point():
    cam = CameraModel(id="c", fx=1000.0, fy=1000.0, cx=960.0, cy=540.0,
                      extrinsic=np.eye(4), image_width=1920, image_height=1080)
    assert np.allclose(project(cam, np.array([0.0, 0.0, 1.0])), [960.0, 540.0])


def test_project_analytic_offset():
    cam = CameraModel(id="c", fx=1000.0, fy=1000.0, cx=960.0, cy=540.0,
                      extrinsic=np.eye(4), image_width=1920, image_height=1080)
    assert np.allclose(project(cam, np.array([0.1, 0.0, 1.0])), [1060.0, 540.0])


def test_project_matches_homogeneous_oracle():
    rng = np.random.default_rng(11)
    for _ in range(300):
        cam = random_camera(rng)
        point = random_point_in_view(rng)
        assert np.allclose(project(cam, point), oracle_project(cam, point), atol=1e-9)


def test_project_behind_camera_raises():
    cam = CameraModel(id="c", fx=1000.0, fy=1000.0, cx=960.0, cy=540.0,
                      extrinsic=np.eye(4), image_width=1920, image_height=1080)
    with pytest.raises(BehindCamera):
        project(cam, np.array([0.0, 0.0, -1.0]))
    with pytest.raises(BehindCamera):
        project(cam, np.array([0.1, 0.1, 0.0]))


def test_project_scale_consistency():
    # scaling a point's camera-frame coordinates must not move the pixel
    rng = np.random.default_rng(12)
    for _ in range(50):
        cam = random_camera(rng)
        point = random_point_in_view(rng)
        pc = cam.extrinsic[:3, :3] @ point + cam.extrinsic[:3, 3]
        for lam in (0.5, 2.0, 7.3):
            world = cam.extrinsic[:3, :3].T @ (lam * pc - cam.extrinsic[:3, 3])
            assert np.allclose(project(cam, world), project(cam, point), atol=1e-6)


def test_camera_model_validation():
    bad_rot = np.eye(4)
    bad_rot[0, 1] = 0.5
    with pytest.raises(ValueError):
        CameraModel(id="c", fx=1000.0, fy=1000.0, cx=0.0, cy=0.0,
                    extrinsic=bad_rot, image_width=10, image_height=10)
    with pytest.raises(ValueError):
        CameraModel(id="c", fx=-1.0, fy=1000.0, cx=0.0, cy=0.0,
                    extrinsic=np.eye(4), image_width=10, image_height=10)
    with pytest.raises(ValueError):
        CameraModel(id="c", fx=1000.0, fy=1000.0, cx=0.0, cy=0.0,
                    extrinsic=np.eye(4), image_width=0, image_height=10)
    # reflections are not rotations
    refl = np.diag([1.0, 1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        CameraModel(id="c", fx=1000.0, fy=1000.0, cx=0.0, cy=0.0,
                    extrinsic=refl, image_width=10, image_height=10)


# ---------------------------------------------------------------------------
# two-view triangulation

def test_triangulate_pair_exact_inversion():
    rng = np.random.default_rng(21)
    for _ in range(200):
        cam_a = random_camera(rng, "a")
        cam_b = random_camera(rng, "b")
        point = random_point_in_view(rng)
        rec = triangulate_pair(cam_a, cam_b, oracle_project(cam_a, point),
                               oracle_project(cam_b, point))
        assert np.linalg.norm(rec - point) < 1e-9


def test_triangulate_pair_perturbed_matches_grid_oracle():
    rng = np.random.default_rng(22)
    for _ in range(20):
        cam_a = random_camera(rng, "a")
        cam_b = random_camera(rng, "b")
        point = random_point_in_view(rng)
        pa = oracle_project(cam_a, point) + np.array([0.5, 0.0])
        pb = oracle_project(cam_b, point) + np.array([0.5, 0.0])
        rec = triangulate_pair(cam_a, cam_b, pa, pb)
        ref = oracle_triangulate([cam_a, cam_b], [pa, pb], [1.0, 1.0], init=point)
        assert np.linalg.norm(rec - ref) < 1e-6


def test_triangulate_pair_identical_centers():
    cam_a = make_camera("a", (1.0, 0.0, 1.0))
    cam_b = make_camera("b", (1.0, 0.0, 1.0), target=(0.0, 0.1, 0.0))
    with pytest.raises(DegenerateGeometry):
        triangulate_pair(cam_a, cam_b, np.zeros(2), np.zeros(2))


def test_triangulate_pair_cheirality():
    # both cameras at z>0 looking along -z; a point behind them still has a
    # well-defined homogeneous image, but triangulation must flag it
    cam_a = make_camera("a", (0.0, 0.0, 2.0))
    cam_b = make_camera("b", (0.4, 0.0, 2.0))
    behind = np.array([0.05, 0.0, 4.0])
    with pytest.raises(CheiralityViolation):
        triangulate_pair(cam_a, cam_b, oracle_project(cam_a, behind),
                         oracle_project(cam_b, behind))


# ---------------------------------------------------------------------------
# multi-view triangulation

def eight_ring_cameras():
    cams = []
    for k in range(8):
        ang = 2.0 * np.pi * k / 8.0
        pos = (1.5 * np.cos(ang), 1.5 * np.sin(ang), 1.0)
        cams.append(make_camera(f"cam{k}", pos))
    return cams


def test_multiview_exact_eight_views():
    rng = np.random.default_rng(31)
    cams = eight_ring_cameras()
    for _ in range(100):
        point = random_point_in_view(rng)
        obs = [oracle_project(c, point) for c in cams]
        rec = triangulate_multiview(cams, obs, [1.0] * 8)
        assert np.linalg.norm(rec - point) < 1e-9


@pytest.mark.parametrize("w", [1.0, 0.37])
def test_multiview_two_views_matches_pair(w):
    rng = np.random.default_rng(32)
    for _ in range(50):
        cam_a = random_camera(rng, "a")
        cam_b = random_camera(rng, "b")
        point = random_point_in_view(rng)
        pa = oracle_project(cam_a, point) + rng.normal(scale=0.5, size=2)
        pb = oracle_project(cam_b, point) + rng.normal(scale=0.5, size=2)
        try:
            pair = triangulate_pair(cam_a, cam_b, pa, pb)
        except CheiralityViolation:
            continue
        multi = triangulate_multiview([cam_a, cam_b], [pa, pb], [w, w])
        assert np.linalg.norm(pair - multi) < 1e-12


def test_multiview_zero_weight_drops_observation():
    rng = np.random.default_rng(33)
    cams = eight_ring_cameras()[:4]
    point = random_point_in_view(rng)
    obs = [oracle_project(c, point) + rng.normal(scale=1.0, size=2) for c in cams]
    with_zero = triangulate_multiview(cams, obs, [1.0, 0.8, 0.6, 0.0])
    reduced = triangulate_multiview(cams[:3], obs[:3], [1.0, 0.8, 0.6])
    assert np.array_equal(with_zero, reduced)


def test_multiview_permutation_invariance():
    rng = np.random.default_rng(34)
    cams = eight_ring_cameras()
    point = random_point_in_view(rng)
    obs = [oracle_project(c, point) + rng.normal(scale=1.0, size=2) for c in cams]
    base = triangulate_multiview(cams, obs, [1.0] * 8)
    for _ in range(10):
        perm = rng.permutation(8)
        shuffled = triangulate_multiview([cams[i] for i in perm],
                                         [obs[i] for i in perm], [1.0] * 8)
        assert np.linalg.norm(base - shuffled) < 1e-12


def test_multiview_insufficient_views():
    cams = eight_ring_cameras()
    point = np.zeros(3)
    obs = [oracle_project(c, point) for c in cams]
    with pytest.raises(InsufficientViews):
        triangulate_multiview(cams[:1], obs[:1], [1.0])
    with pytest.raises(InsufficientViews):
        triangulate_multiview(cams[:3], obs[:3], [1.0, 0.0, 0.0])


def test_multiview_weighted_matches_grid_oracle():
    rng = np.random.default_rng(35)
    cams = eight_ring_cameras()[:4]
    for _ in range(8):
        point = random_point_in_view(rng)
        obs = [oracle_project(c, point) + rng.normal(scale=1.5, size=2) for c in cams]
        weights = rng.uniform(0.2, 1.0, size=4)
        rec = triangulate_multiview(cams, obs, weights)
        ref = oracle_triangulate(cams, obs, weights, init=point)
        assert np.linalg.norm(rec - ref) < 1e-6


def test_roundtrip_depth_range():
    # ground-truth points at depths 0.2..5 m recovered from clean projections
    rng = np.random.default_rng(36)
    for _ in range(1000):
        cam_a = random_camera(rng, "a")
        cam_b = random_camera(rng, "b")
        cam_c = random_camera(rng, "c")
        cams = [cam_a, cam_b, cam_c]
        # sample a point at a controlled depth in camera a, keep it visible
        depth = rng.uniform(0.2, 5.0)
        ray = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 1.0])
        pc = ray * depth
        point = cam_a.extrinsic[:3, :3].T @ (pc - cam_a.extrinsic[:3, 3])
        obs = []
        for c in cams:
            q = c.extrinsic[:3, :3] @ point + c.extrinsic[:3, 3]
            if q[2] <= 0.05:
                break
            obs.append(oracle_project(c, point))
        if len(obs) < 3:
            continue
        rec = triangulate_multiview(cams, obs, [1.0] * 3)
        assert np.linalg.norm(rec - point) < 1e-7


# ---------------------------------------------------------------------------
# batched two-view solves

def test_batch_pairs_matches_scalar():
    rng = np.random.default_rng(41)
    cams_a, cams_b, pix_a, pix_b, expect = [], [], [], [], []
    for _ in range(60):
        cam_a = random_camera(rng, "a")
        cam_b = random_camera(rng, "b")
        point = random_point_in_view(rng)
        pa = oracle_project(cam_a, point) + rng.normal(scale=0.5, size=2)
        pb = oracle_project(cam_b, point) + rng.normal(scale=0.5, size=2)
        cams_a.append(cam_a)
        cams_b.append(cam_b)
        pix_a.append(pa)
        pix_b.append(pb)
        try:
            expect.append((triangulate_pair(cam_a, cam_b, pa, pb), True))
        except CheiralityViolation:
            expect.append((None, False))
    xyz, ok = triangulate_pairs_batch(
        np.stack([c.extrinsic for c in cams_a]),
        np.stack([c.projection for c in cams_a]),
        np.stack([c.extrinsic for c in cams_b]),
        np.stack([c.projection for c in cams_b]),
        np.array(pix_a), np.array(pix_b),
    )
    for i, (pt, valid) in enumerate(expect):
        assert ok[i] == valid
        if valid:
            assert np.linalg.norm(xyz[i] - pt) < 1e-12


# ---------------------------------------------------------------------------
# reprojection error

def test_reprojection_zero_for_exact():
    rng = np.random.default_rng(51)
    cams = eight_ring_cameras()[:3]
    joints = rng.normal(scale=0.1, size=(21, 3))
    matched = []
    for c in cams:
        pix = np.array([project(c, j) for j in joints])
        matched.append((c, Detection2D(camera_id=c.id, keypoints=pix,
                                       keypoint_conf=np.ones(21),
                                       bbox=(0.0, 0.0, 10.0, 10.0),
                                       side_prob=0.5, det_conf=1.0)))
    assert reprojection_error(joints, matched) == 0.0


def test_reprojection_three_four_five():
    cam = make_camera("a", (0.0, -1.5, 1.0))
    joint = np.array([[0.0, 0.0, 0.0]])
    det = make_detection(cam, joint)
    shifted = Detection2D(
        camera_id=cam.id, keypoints=det.keypoints + np.array([[3.0, 4.0]]),
        keypoint_conf=det.keypoint_conf, bbox=det.bbox,
        side_prob=det.side_prob, det_conf=det.det_conf,
    )
    assert np.isclose(reprojection_error(joint, [(cam, shifted)]), 25.0)


def test_reprojection_matches_loop_oracle():
    rng = np.random.default_rng(52)
    cams = eight_ring_cameras()
    for _ in range(40):
        joints = rng.normal(scale=0.15, size=(21, 3))
        # some joints unknown, some detections low-confidence
        joints[rng.integers(0, 21, size=3)] = np.nan
        matched = []
        for c in cams[: rng.integers(2, 6)]:
            conf = rng.uniform(0.0, 1.0, size=21)
            matched.append((c, make_detection(c, np.nan_to_num(joints), rng=rng, conf=conf)))
        got = reprojection_error(joints, matched)
        want = oracle_reprojection(joints, matched)
        assert np.isclose(got, want, rtol=0.0, atol=1e-9)


def test_reprojection_behind_camera_penalty():
    cam = make_camera("a", (0.0, 0.0, 2.0))  # looks along -z from z=2
    joint = np.array([[0.0, 0.0, 4.0]])      # behind that camera
    det = Detection2D(camera_id=cam.id, keypoints=np.array([[5.0, 5.0]]),
                      keypoint_conf=np.ones(1), bbox=(0.0, 0.0, 1.0, 1.0),
                      side_prob=0.5, det_conf=1.0)
    want = 1920.0 ** 2 + 1080.0 ** 2
    assert np.isclose(reprojection_error(joint, [(cam, det)]), want)


def test_reprojection_additive_over_disjoint_cameras():
    rng = np.random.default_rng(53)
    cams = eight_ring_cameras()[:4]
    joints = rng.normal(scale=0.1, size=(21, 3))
    matched = [(c, make_detection(c, joints, rng=rng)) for c in cams]
    whole = reprojection_error(joints, matched)
    parts = reprojection_error(joints, matched[:2]) + reprojection_error(joints, matched[2:])
    assert np.isclose(whole, parts, rtol=0.0, atol=1e-9)
    assert whole >= 0.0


def test_reprojection_zero_iff_exact():
    rng = np.random.default_rng(54)
    cam = eight_ring_cameras()[0]
    joints = rng.normal(scale=0.1, size=(5, 3))
    det = make_detection(cam, joints)
    nudged = Detection2D(
        camera_id=cam.id,
        keypoints=det.keypoints + np.array([[1e-3, 0.0]] + [[0.0, 0.0]] * 4),
        keypoint_conf=det.keypoint_conf, bbox=det.bbox,
        side_prob=det.side_prob, det_conf=det.det_conf,
    )
    assert reprojection_error(joints, [(cam, nudged)]) > 0.0


# ---------------------------------------------------------------------------
# detection validation

def test_detection_validation():
    good = dict(camera_id="c", keypoints=np.zeros((21, 2)),
                keypoint_conf=np.ones(21), bbox=(0.0, 0.0, 5.0, 5.0),
                side_prob=0.5, det_conf=0.9)
    Detection2D(**good)
    with pytest.raises(ValueError):
        Detection2D(**{**good, "keypoint_conf": np.full(21, 1.5)})
    with pytest.raises(ValueError):
        Detection2D(**{**good, "side_prob": -0.1})
    with pytest.raises(ValueError):
        Detection2D(**{**good, "bbox": (0.0, 0.0, -1.0, 5.0)})
    bad_kp = np.zeros((21, 2))
    bad_kp[3, 0] = np.nan
    with pytest.raises(ValueError):
        Detection2D(**{**good, "keypoints": bad_kp})
