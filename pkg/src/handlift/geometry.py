"""Pinhole camera math: projection, triangulation, reprojection error.

Conventions used across the package:
  - world and camera coordinates are meters; pixels are (u, v)
  - extrinsics are 4x4 world-to-camera rigid transforms, +z looking forward
  - a hand pose is a (J, 3) float64 array; NaN rows mark joints with no
    estimate (Pose3D below is an alias, not a wrapper class)
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    BehindCamera,
    CheiralityViolation,
    DegenerateGeometry,
    InsufficientViews,
)

Pose3D = np.ndarray

DEFAULT_CONF_CUTOFF = 0.05


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Calibrated pinhole camera with a rigid world-to-camera transform."""

    id: str
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        ext = np.array(self.extrinsic, dtype=np.float64).reshape(4, 4)
        ext.setflags(write=False)
        object.__setattr__(self, "extrinsic", ext)
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError(f"camera {self.id}: image size must be positive")
        rot = ext[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError(f"camera {self.id}: rotation block is not orthonormal")
        if np.linalg.det(rot) < 0.0:
            raise ValueError(f"camera {self.id}: rotation block is a reflection")
        if not np.allclose(ext[3], (0.0, 0.0, 0.0, 1.0)):
            raise ValueError(f"camera {self.id}: last extrinsic row must be 0,0,0,1")

    @cached_property
    def projection(self) -> np.ndarray:
        """3x4 homogeneous projection matrix (intrinsics times extrinsics)."""
        k = np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])
        out = k @ self.extrinsic[:3]
        out.setflags(write=False)
        return out

    @cached_property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        out = -self.extrinsic[:3, :3].T @ self.extrinsic[:3, 3]
        out.setflags(write=False)
        return out

    @cached_property
    def diagonal_sq(self) -> float:
        """Squared image diagonal in px^2, the behind-camera penalty unit."""
        return float(self.image_width) ** 2 + float(self.image_height) ** 2


@dataclass(frozen=True, eq=False)
class Detection2D:
    """One detected hand in one camera image.

    keypoints: (J, 2) pixel coordinates
    keypoint_conf: (J,) confidences in [0, 1]
    bbox: (x, y, w, h) pixels
    side_prob: probability that the hand is a RIGHT hand
    det_conf: overall detection confidence
    """

    camera_id: str
    keypoints: np.ndarray
    keypoint_conf: np.ndarray
    bbox: tuple
    side_prob: float
    det_conf: float

    def __post_init__(self):
        kps = np.array(self.keypoints, dtype=np.float64)
        conf = np.array(self.keypoint_conf, dtype=np.float64)
        if kps.ndim != 2 or kps.shape[1] != 2 or conf.shape != (kps.shape[0],):
            raise ValueError("keypoints must be (J, 2) with matching confidences")
        if not np.all(np.isfinite(kps)):
            raise ValueError("keypoint coordinates must be finite")
        if not np.all((conf >= 0.0) & (conf <= 1.0)):
            raise ValueError("keypoint confidences must lie in [0, 1]")
        if not (0.0 <= self.side_prob <= 1.0 and 0.0 <= self.det_conf <= 1.0):
            raise ValueError("side_prob and det_conf must lie in [0, 1]")
        box = tuple(float(v) for v in self.bbox)
        if len(box) != 4 or box[2] < 0.0 or box[3] < 0.0:
            raise ValueError("bbox must be (x, y, w, h) with non-negative size")
        kps.setflags(write=False)
        conf.setflags(write=False)
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "keypoint_conf", conf)
        object.__setattr__(self, "bbox", box)

    @property
    def joint_count(self) -> int:
        return self.keypoints.shape[0]


def project(camera: CameraModel, point) -> np.ndarray:
    """Project a world point to pixels; raises BehindCamera on depth <= 0."""
    p = np.asarray(point, dtype=np.float64)
    pc = camera.extrinsic[:3, :3] @ p + camera.extrinsic[:3, 3]
    if not pc[2] > 0.0:
        raise BehindCamera(f"depth {pc[2]:.6g} m in camera {camera.id}")
    return np.array([
        camera.fx * pc[0] / pc[2] + camera.cx,
        camera.fy * pc[1] / pc[2] + camera.cy,
    ])


def project_points(camera: CameraModel, points):
    """Vectorized projection that never raises.

    Returns (pixels (..., 2), in_front (...,) bool); pixels for points at or
    behind the camera plane are meaningless and must be gated by the mask.
    """
    pts = np.asarray(points, dtype=np.float64)
    pc = pts @ camera.extrinsic[:3, :3].T + camera.extrinsic[:3, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([
            camera.fx * pc[..., 0] / pc[..., 2] + camera.cx,
            camera.fy * pc[..., 1] / pc[..., 2] + camera.cy,
        ], axis=-1)
    with np.errstate(invalid="ignore"):
        in_front = pc[..., 2] > 0.0
    return uv, in_front


# ---------------------------------------------------------------------------
# DLT internals
#
# Every triangulation below stacks rows (u*P3 - P1, v*P3 - P2), normalizes
# each row to unit norm for conditioning, and takes the eigenvector of A^T A
# with the smallest eigenvalue. For a symmetric positive semi-definite A^T A
# this is exactly the right-singular vector of A with the smallest singular
# value. The solve runs as vectorized power iteration on the adjugate of
# A^T A (whose dominant eigenvector is that same smallest eigenvector), with
# a LAPACK fallback for the rare systems where the iteration has not
# converged; per-matrix LAPACK calls on huge proposal batches are the main
# triangulation cost otherwise.

_ADJ_TOL = 1e-11
_ADJ_ROUNDS = (2, 4, 8, 16)  # squared-matrix steps, each worth two plain ones
_UPPER = [(i, j) for i in range(4) for j in range(i, 4)]
_MINOR = [(1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2)]

def _dlt_rows(proj, pix):
    """proj (...,3,4), pix (...,2) -> (...,2,4) unit-norm constraint rows."""
    rows = pix[..., :, None] * proj[..., 2:3, :] - proj[..., :2, :]
    norm = np.linalg.norm(rows, axis=-1, keepdims=True)
    return rows / np.where(norm > 0.0, norm, 1.0)


def _sym4_adjugate(s):
    """Adjugate of symmetric 4x4 matrices given as {(i,j): (n,) entries}."""

    def ent(i, j):
        return s[(i, j) if i <= j else (j, i)]

    def det3(r, c):
        a, b, c0 = ent(r[0], c[0]), ent(r[0], c[1]), ent(r[0], c[2])
        d, e, f = ent(r[1], c[0]), ent(r[1], c[1]), ent(r[1], c[2])
        g, h, i = ent(r[2], c[0]), ent(r[2], c[1]), ent(r[2], c[2])
        return a * (e * i - f * h) - b * (d * i - f * g) + c0 * (d * h - e * g)

    adj = {}
    for i, j in _UPPER:
        # adj[i, j] = cofactor(j, i); symmetric input, symmetric adjugate
        val = det3(_MINOR[j], _MINOR[i])
        adj[(i, j)] = -val if (i + j) % 2 else val
    return adj


def _sym4_apply(m, v):
    """(m @ v) for symmetric entry-dict m and component-list v."""
    v0, v1, v2, v3 = v
    return [
        m[(0, 0)] * v0 + m[(0, 1)] * v1 + m[(0, 2)] * v2 + m[(0, 3)] * v3,
        m[(0, 1)] * v0 + m[(1, 1)] * v1 + m[(1, 2)] * v2 + m[(1, 3)] * v3,
        m[(0, 2)] * v0 + m[(1, 2)] * v1 + m[(2, 2)] * v2 + m[(2, 3)] * v3,
        m[(0, 3)] * v0 + m[(1, 3)] * v1 + m[(2, 3)] * v2 + m[(3, 3)] * v3,
    ]


def _sym4_square(m):
    """Entry-dict square of a symmetric 4x4; symmetric again."""

    def ent(i, j):
        return m[(i, j) if i <= j else (j, i)]

    return {(i, j): ent(i, 0) * ent(0, j) + ent(i, 1) * ent(1, j)
            + ent(i, 2) * ent(2, j) + ent(i, 3) * ent(3, j)
            for i, j in _UPPER}


def _power_rounds(s, adj, out):
    """Residual-gated power iteration on the squared adjugate, updating out.

    The adjugate is squared once so each step is worth two plain ones; it
    is positive semidefinite here, so squaring keeps the dominant
    eigenvector. Returns the indices of systems still above tolerance
    after the step budget; those need the exact solver. Subsets shrink
    each round so the easy bulk costs a handful of cheap vector passes.
    """
    scale = _ADJ_TOL * (s[(0, 0)] + s[(1, 1)] + s[(2, 2)] + s[(3, 3)])
    idx = np.arange(len(scale))
    v = list(out)
    sq = _sym4_square(adj)
    for round_no, steps in enumerate(_ADJ_ROUNDS):
        for _ in range(steps):
            w = _sym4_apply(sq, v)
            n = np.sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2] + w[3] * w[3])
            n = np.where(n > 0.0, n, 1.0)
            v = [w[i] / n for i in range(4)]
        for i in range(4):
            if round_no == 0:
                out[i] = v[i]
            else:
                out[i][idx] = v[i]
        sv = _sym4_apply(s, v)
        rho = sv[0] * v[0] + sv[1] * v[1] + sv[2] * v[2] + sv[3] * v[3]
        rsq = ((sv[0] - rho * v[0]) ** 2 + (sv[1] - rho * v[1]) ** 2
               + (sv[2] - rho * v[2]) ** 2 + (sv[3] - rho * v[3]) ** 2)
        finite = np.isfinite(v[0] + v[1] + v[2] + v[3])
        bad = ~(finite & (rsq <= scale * scale))
        if not bad.any():
            return np.zeros(0, dtype=np.int64)
        keep = np.flatnonzero(bad)
        idx = idx[keep]
        s = {k: arr[keep] for k, arr in s.items()}
        sq = {k: arr[keep] for k, arr in sq.items()}
        v = [arr[keep] for arr in v]
        scale = scale[keep]
    return idx


def _smallest_eigvec(a):
    """a (...,k,4) -> (...,4) minimizer of ||a x|| over unit vectors x."""
    lead = a.shape[:-2]
    rows = a.reshape(-1, a.shape[-2], 4)
    cols = [np.ascontiguousarray(rows[:, :, i]) for i in range(4)]
    s = {(i, j): np.einsum("nk,nk->n", cols[i], cols[j]) for i, j in _UPPER}
    return _solve_gram(s, lead)


def _solve_gram(s, lead):
    """Smallest eigenvector from gram entries {(i,j): (n,)} -> (*lead,4)."""
    adj = _sym4_adjugate(s)

    # adjugate columns are inverse-iteration steps from the unit basis, so
    # the best-scaled column already points near the target eigenvector
    def ent(i, j):
        return adj[(i, j) if i <= j else (j, i)]

    norms = np.stack([ent(0, j) ** 2 + ent(1, j) ** 2 + ent(2, j) ** 2
                      + ent(3, j) ** 2 for j in range(4)])
    pick = np.argmax(norms, axis=0)
    v = [np.choose(pick, [ent(i, 0), ent(i, 1), ent(i, 2), ent(i, 3)])
         for i in range(4)]

    hard = _power_rounds(s, adj, v)
    if len(hard):
        mats = np.empty((len(hard), 4, 4))
        for i, j in _UPPER:
            mats[:, i, j] = mats[:, j, i] = s[(i, j)][hard]
        _, vecs = np.linalg.eigh(mats)
        for i in range(4):
            v[i][hard] = vecs[:, i, 0]
    return np.stack(v, axis=-1).reshape(*lead, 4)


def _dehomogenize(h):
    with np.errstate(divide="ignore", invalid="ignore"):
        return h[..., :3] / h[..., 3:4]


def triangulate_multiview(cams, observations, weights=None) -> np.ndarray:
    """Weighted DLT over >= 2 observations of one point.

    Observations with weight <= 0 are dropped before the solve; fewer than
    two remaining raises InsufficientViews.
    """
    obs = np.asarray(observations, dtype=np.float64).reshape(-1, 2)
    if weights is None:
        w = np.ones(len(obs))
    else:
        w = np.asarray(weights, dtype=np.float64)
    keep = w > 0.0
    if int(keep.sum()) < 2:
        raise InsufficientViews(f"{int(keep.sum())} usable observations")
    projs = np.stack([c.projection for c, k in zip(cams, keep) if k])
    rows = _dlt_rows(projs, obs[keep]) * w[keep][:, None, None]
    return _dehomogenize(_smallest_eigvec(rows.reshape(-1, 4)))


def triangulate_pair(cam_a: CameraModel, cam_b: CameraModel, kp_a, kp_b) -> np.ndarray:
    """Two-view DLT with baseline and cheirality checks."""
    if np.linalg.norm(cam_a.center - cam_b.center) <= 1e-6:
        raise DegenerateGeometry(f"cameras {cam_a.id} and {cam_b.id} share a center")
    xyz = triangulate_multiview([cam_a, cam_b], [kp_a, kp_b])
    for cam in (cam_a, cam_b):
        depth = cam.extrinsic[2, :3] @ xyz + cam.extrinsic[2, 3]
        if not depth > 0.0:
            raise CheiralityViolation(f"point behind camera {cam.id}")
    return xyz


def triangulate_pairs_batch(ext_a, proj_a, ext_b, proj_b, pix_a, pix_b):
    """Vectorized two-view DLT over N independent systems.

    ext_*: (N,4,4) extrinsics, proj_*: (N,3,4), pix_*: (N,2).
    Returns (xyz (N,3), ok (N,)); ok means finite with positive depth in both
    cameras. Degenerate baselines are the caller's job to exclude.
    """
    rows = np.concatenate([_dlt_rows(proj_a, pix_a), _dlt_rows(proj_b, pix_b)], axis=-2)
    xyz = _dehomogenize(_smallest_eigvec(rows))
    xh = np.concatenate([xyz, np.ones_like(xyz[..., :1])], axis=-1)
    za = np.einsum("nj,nj->n", ext_a[:, 2, :], xh)
    zb = np.einsum("nj,nj->n", ext_b[:, 2, :], xh)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(xyz).all(axis=-1) & (za > 0.0) & (zb > 0.0)
    return xyz, ok


def _pair_gram(proj, pix):
    """One camera's contribution to the per-joint DLT gram, factored.

    proj (P,3,4), pix (P,J,2). A DLT row r = u*p2 - px has unit-normalized
    self-outer r r^T / |r|^2 whose entries are quadratics in u, so the
    contribution splits into joint-dependent features (P,J,5) times
    camera-dependent constants (P,5,16); their product, summed with the
    other camera's, is the stacked gram.
    """
    p0, p1, p2 = proj[:, 0], proj[:, 1], proj[:, 2]
    a22 = np.einsum("pi,pi->p", p2, p2)[:, None]
    feats, consts = [], []
    t2sum = 0.0
    for row, coord in ((p0, pix[..., 0]), (p1, pix[..., 1])):
        ar = np.einsum("pi,pi->p", p2, row)[:, None]
        aa = np.einsum("pi,pi->p", row, row)[:, None]
        inv = 1.0 / (coord * coord * a22 - 2.0 * coord * ar + aa)
        t1 = coord * inv
        t2sum = t2sum + coord * t1
        feats += [-t1, inv]
        consts += [p2[:, :, None] * row[:, None, :]
                   + row[:, :, None] * p2[:, None, :],
                   row[:, :, None] * row[:, None, :]]
    # both rows share the p2 outer, so their u^2 features merge
    feats.append(t2sum)
    consts.append(p2[:, :, None] * p2[:, None, :])
    return feats, consts


def triangulate_joint_pairs(proj_a, proj_b, depth_a, depth_b, pix_a, pix_b):
    """Two-view DLT for all joints of P detection pairs at once.

    proj_*: (P,3,4) projections, depth_*: (P,4) extrinsic depth rows,
    pix_*: (P,J,2). Returns (xyz (P,J,3), ok (P,J)); the gram of each
    4-row system is assembled directly from per-camera constants so
    nothing row-sized is materialized per joint.
    """
    fa, ka = _pair_gram(proj_a, pix_a)
    fb, kb = _pair_gram(proj_b, pix_b)
    feats = np.stack(fa + fb, axis=-1)
    consts = np.stack([c.reshape(len(c), 16) for c in ka + kb], axis=1)
    gram = feats @ consts
    s = {(i, j): np.ascontiguousarray(gram[..., 4 * i + j]).reshape(-1)
         for i, j in _UPPER}
    xyz = _dehomogenize(_solve_gram(s, pix_a.shape[:2]))
    xh = np.concatenate([xyz, np.ones_like(xyz[..., :1])], axis=-1)
    za = np.einsum("pj,pkj->pk", depth_a, xh)
    zb = np.einsum("pj,pkj->pk", depth_b, xh)
    with np.errstate(invalid="ignore"):
        ok = np.isfinite(xyz).all(axis=-1) & (za > 0.0) & (zb > 0.0)
    return xyz, ok


def triangulate_weighted_joints(projs, pixels, weights) -> np.ndarray:
    """Per-joint weighted DLT across views, batched over joints.

    projs: (V,3,4), pixels: (V,J,2), weights: (V,J) with zeros for excluded
    observations. Joints with fewer than two positive-weight views come back
    as NaN rows.
    """
    rows = _dlt_rows(projs[:, None], pixels)
    rows = np.where(weights[..., None, None] > 0.0, rows * weights[..., None, None], 0.0)
    stacked = rows.transpose(1, 0, 2, 3).reshape(pixels.shape[1], -1, 4)
    xyz = _dehomogenize(_smallest_eigvec(stacked))
    xyz[(weights > 0.0).sum(axis=0) < 2] = np.nan
    return xyz


def reprojection_error(pose, matched, conf_cutoff: float = DEFAULT_CONF_CUTOFF) -> float:
    """Sum of squared pixel residuals of a pose against matched detections.

    Joints below the confidence cutoff or without a finite 3D estimate are
    excluded; an included joint behind a camera contributes that camera's
    squared image diagonal instead of a residual.
    """
    joints = np.asarray(pose, dtype=np.float64)
    total = 0.0
    for cam, det in matched:
        sel = (det.keypoint_conf >= conf_cutoff) & np.isfinite(joints).all(axis=1)
        if not sel.any():
            continue
        pc = joints[sel] @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
        front = pc[:, 2] > 0.0
        total += float((~front).sum()) * cam.diagonal_sq
        if front.any():
            p = pc[front]
            uv = np.stack([
                cam.fx * p[:, 0] / p[:, 2] + cam.cx,
                cam.fy * p[:, 1] / p[:, 2] + cam.cy,
            ], axis=1)
            diff = uv - det.keypoints[sel][front]
            total += float((diff * diff).sum())
    return total
