"""3D hand proposal clustering, track association, and cluster fusion.

Pipeline stage between 2D detections and per-frame hand estimates:
pairwise two-view lifting produces proposals, single-linkage grouping in
pose space produces clusters, clusters are matched to live tracks, and a
matched cluster is fused into one multi-view hand estimate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from operator import itemgetter

import numpy as np
from numba import njit
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import Incomparable, InsufficientViews
from .geometry import (
    DEFAULT_CONF_CUTOFF,
    triangulate_joint_pairs,
    triangulate_weighted_joints,
)

LEFT = "LEFT"
RIGHT = "RIGHT"
FUSED = "FUSED"
CARRIED_FORWARD = "CARRIED_FORWARD"

WRIST = 0
_FAR = 1e9  # stand-in cost for gated / incomparable assignment cells
_PRIO_KEY = itemgetter(0)


@dataclass(frozen=True, eq=False)
class Proposal3D:
    """One hand lifted from a single camera pair.

    pose: (J, 3) world joints, NaN rows where the pair could not lift
    source: ((camera_id, detection_index), (camera_id, detection_index))
    mean_conf: mean det_conf of the two source detections
    """

    pose: np.ndarray
    source: tuple
    mean_conf: float


@dataclass(eq=False)
class Cluster:
    """A conflict-free group of proposals believed to be one hand."""

    proposals: tuple
    cameras: frozenset
    detections: frozenset
    mean_pose: np.ndarray
    seed_track: int | None = None

    @classmethod
    def from_proposals(cls, proposals, seed_track=None):
        proposals = tuple(proposals)
        detections = frozenset(s for p in proposals for s in p.source)
        cameras = frozenset(cid for cid, _ in detections)
        if len(proposals) == 1:
            # joints are all-finite or all-NaN rows, so the mean of one
            # pose is the pose itself
            mean = proposals[0].pose
        else:
            mean = _nanmean_pose(np.stack([p.pose for p in proposals]))
        return cls(proposals, cameras, detections, mean, seed_track)

    def dm_valid(self) -> bool:
        return len(self.cameras) >= 3

    def tm_valid(self) -> bool:
        return self.dm_valid() or (len(self.cameras) >= 2 and self.seed_track is not None)


@dataclass(eq=False)
class HandEstimate:
    """Final per-frame hand: fused from detections or carried forward."""

    pose: np.ndarray
    side: str
    side_confidence: float
    track_id: int | None
    contributing: frozenset
    status: str
    interpolated_joints: frozenset = frozenset()


@dataclass(eq=False)
class TrackState:
    track_id: int
    last_pose: np.ndarray
    last_threshold: float
    frames_since_update: int
    side: str
    side_confidence: float = 0.0


def _nanmean_pose(poses: np.ndarray) -> np.ndarray:
    """Per-joint mean over (P, J, 3) ignoring NaN joints, without warnings."""
    finite = np.isfinite(poses).all(axis=2)
    count = finite.sum(axis=0)
    total = np.where(finite[:, :, None], poses, 0.0).sum(axis=0)
    out = np.full(poses.shape[1:], np.nan)
    np.divide(total, count[:, None], out=out, where=count[:, None] > 0)
    return out


# ---------------------------------------------------------------------------
# proposals

def build_proposals(detections, cameras, conf_cutoff=DEFAULT_CONF_CUTOFF):
    """Lift every cross-camera detection pair to a 3D proposal.

    detections: {camera_id: [Detection2D or None, ...]} for one frame, with
    None marking rejected slots (indices stay stable). A pair survives when
    its wrist lifts cleanly and at least half of the mutually confident
    joints do; everything else is dropped silently.
    """
    flat = []  # (camera order index, camera id, slot, detection)
    order = {}
    for cid in sorted(detections):
        for slot, det in enumerate(detections[cid]):
            if det is not None:
                flat.append((order.setdefault(cid, len(order)), cid, slot, det))
    if len(order) < 2:
        return []

    cams = [cameras[cid] for cid in order]
    centers = np.stack([c.center for c in cams])
    apart = np.linalg.norm(centers[:, None] - centers[None], axis=-1) > 1e-6
    cam_idx = np.array([f[0] for f in flat])
    spans = [np.flatnonzero(cam_idx == c) for c in range(len(order))]
    ia_parts, ib_parts = [], []
    for a, b in itertools.combinations(range(len(order)), 2):
        if apart[a, b]:
            ia_parts.append(np.repeat(spans[a], len(spans[b])))
            ib_parts.append(np.tile(spans[b], len(spans[a])))
    if not ia_parts:
        return []
    ia = np.concatenate(ia_parts)
    ib = np.concatenate(ib_parts)

    kps = np.stack([f[3].keypoints for f in flat])
    conf = np.stack([f[3].keypoint_conf for f in flat])
    projs = np.stack([c.projection for c in cams])
    extz = np.stack([c.extrinsic[2] for c in cams])

    xyz, ok = triangulate_joint_pairs(
        projs[cam_idx[ia]], projs[cam_idx[ib]],
        extz[cam_idx[ia]], extz[cam_idx[ib]],
        kps[ia], kps[ib])

    mutual = (conf[ia] >= conf_cutoff) & (conf[ib] >= conf_cutoff)
    good = ok & mutual
    keep = good[:, WRIST] & (2 * good.sum(axis=1) >= mutual.sum(axis=1))
    poses = np.where(good[:, :, None], xyz, np.nan)

    out = []
    for k in np.flatnonzero(keep):
        _, ca, slot_a, da = flat[ia[k]]
        _, cb, slot_b, db = flat[ib[k]]
        out.append(Proposal3D(
            pose=poses[k],
            source=((ca, slot_a), (cb, slot_b)),
            mean_conf=(da.det_conf + db.det_conf) / 2.0,
        ))
    return out


# ---------------------------------------------------------------------------
# pose distance

def pose_distance(a, b) -> float:
    """Mean per-joint Euclidean distance over joints finite in both poses."""
    d = np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64),
                       axis=-1)
    finite = np.isfinite(d)
    if not finite.any():
        raise Incomparable("poses share no finite joints")
    return float(d[finite].mean())


@njit("float64[:, ::1](float64[:, :, ::1])", cache=True)
def _pose_dist_kernel(poses):
    n, joints = poses.shape[0], poses.shape[1]
    out = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            total = 0.0
            count = 0
            for k in range(joints):
                dx = poses[a, k, 0] - poses[b, k, 0]
                dy = poses[a, k, 1] - poses[b, k, 1]
                dz = poses[a, k, 2] - poses[b, k, 2]
                dsq = dx * dx + dy * dy + dz * dz
                if np.isfinite(dsq):
                    total += np.sqrt(dsq)
                    count += 1
            if count > 0:
                val = total / count
            else:
                val = np.inf
            # one write per triangle keeps symmetry exact
            out[a, b] = val
            out[b, a] = val
    return out


def pose_distance_matrix(poses: np.ndarray) -> np.ndarray:
    """All-pairs pose_distance over (N, J, 3); incomparable pairs get inf."""
    poses = np.ascontiguousarray(np.asarray(poses, dtype=np.float64))
    return _pose_dist_kernel(poses)


def pose_distance_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """pose_distance of every pose in a (M, J, 3) against b (K, J, 3).

    Incomparable pairs get inf instead of raising. Small inputs only; the
    association stage compares a handful of clusters against live tracks.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(axis=-1))
    finite = np.isfinite(d)
    count = finite.sum(axis=-1)
    total = np.where(finite, d, 0.0).sum(axis=-1)
    out = np.full(total.shape, np.inf)
    np.divide(total, count, out=out, where=count > 0)
    return out


# ---------------------------------------------------------------------------
# clustering

class _CarveCtx:
    """Shared carve state for one proposal set.

    Detections are renumbered into rank ids (sorted detection order, so id
    comparisons match source-tuple comparisons) and each proposal's pair of
    source ids is laid out flat; the greedy claim loop then runs on a plain
    bytearray. Strip results, unit priorities, and built clusters cache by
    member tuple, shared across every radius of a sweep.
    """

    def __init__(self, proposals):
        self.proposals = proposals
        dets = sorted({s for p in proposals for s in p.source})
        ids = {s: k for k, s in enumerate(dets)}
        self.n_dets = len(dets)
        self.src_a = [ids[p.source[0]] for p in proposals]
        self.src_b = [ids[p.source[1]] for p in proposals]
        cams = sorted({s[0] for s in dets})
        cam_ids = {c: k for k, c in enumerate(cams)}
        self.n_cams = len(cams)
        self.cam_a = [cam_ids[p.source[0][0]] for p in proposals]
        self.cam_b = [cam_ids[p.source[1][0]] for p in proposals]
        self.asrc = np.asarray(self.src_a, dtype=np.int64)
        self.bsrc = np.asarray(self.src_b, dtype=np.int64)
        self.acam = np.asarray(self.cam_a, dtype=np.int64)
        self.bcam = np.asarray(self.cam_b, dtype=np.int64)
        self.strip = {}  # comp tuple -> (kept, removed, kept priority)
        self.built = {}  # kept tuple -> Cluster

    def prio(self, members):
        """Claim order: more cameras, then more proposals, then min source."""
        cams = {self.cam_a[i] for i in members}
        cams.update(self.cam_b[i] for i in members)
        return (-len(cams), -len(members),
                min(self.src_a[i] for i in members))


@njit("Tuple((int64[::1], int64[::1]))(int64[::1], float64[:, ::1], "
      "int64[::1], int64[::1], int64[::1], int64[::1], int64, int64)",
      cache=True)
def _strip_kernel(members, dist, asrc, bsrc, acam, bcam, n_cams, n_dets):
    m = members.shape[0]
    # per camera, multiplicity of each distinct detection among members;
    # a conflict exists while any camera sees two distinct detections
    counts = np.zeros((n_cams, n_dets), np.int64)
    distinct = np.zeros(n_cams, np.int64)
    for t in range(m):
        i = members[t]
        if counts[acam[i], asrc[i]] == 0:
            distinct[acam[i]] += 1
        counts[acam[i], asrc[i]] += 1
        if counts[bcam[i], bsrc[i]] == 0:
            distinct[bcam[i]] += 1
        counts[bcam[i], bsrc[i]] += 1
    multi = 0
    for c in range(n_cams):
        if distinct[c] >= 2:
            multi += 1

    removed = np.empty(m, np.int64)
    nrem = 0
    live = np.ones(m, np.uint8)
    if multi > 0:
        sub = np.empty((m, m))
        rowsum = np.empty(m)
        for p in range(m):
            ip = members[p]
            acc = 0.0
            for q in range(m):
                v = dist[ip, members[q]]
                if not np.isfinite(v):
                    v = _FAR
                sub[p, q] = v
                acc += v
            rowsum[p] = acc
        alive = m
        while alive > 1 and multi > 0:
            worst = -1
            wsum = 0.0
            wa = -1
            wb = -1
            for p in range(m):
                if live[p] == 0:
                    continue
                r = rowsum[p]
                sa = asrc[members[p]]
                sb = bsrc[members[p]]
                if (worst == -1 or r > wsum
                        or (r == wsum and (sa > wa or (sa == wa and sb > wb)))):
                    worst = p
                    wsum = r
                    wa = sa
                    wb = sb
            iw = members[worst]
            removed[nrem] = iw
            nrem += 1
            live[worst] = 0
            alive -= 1
            # symmetric, so the contiguous row doubles as the column
            for q in range(m):
                rowsum[q] -= sub[worst, q]
            counts[acam[iw], asrc[iw]] -= 1
            if counts[acam[iw], asrc[iw]] == 0:
                distinct[acam[iw]] -= 1
                if distinct[acam[iw]] == 1:
                    multi -= 1
            counts[bcam[iw], bsrc[iw]] -= 1
            if counts[bcam[iw], bsrc[iw]] == 0:
                distinct[bcam[iw]] -= 1
                if distinct[bcam[iw]] == 1:
                    multi -= 1

    kept = np.empty(m - nrem, np.int64)
    k = 0
    for p in range(m):
        if live[p] == 1:
            kept[k] = members[p]
            k += 1
    return kept, removed[:nrem]


def _strip_conflicts(indices, ctx, dist):
    """Remove the most-distant member until the group is conflict-free.

    Ties on summed distance break toward the larger source, matching a
    plain recompute-and-argmax loop; distances to already-removed members
    leave the running row sums incrementally so big merged groups strip in
    O(members^2) instead of rebuilding the submatrix every round.
    """
    kept, removed = _strip_kernel(
        np.asarray(indices, dtype=np.int64), dist, ctx.asrc, ctx.bsrc,
        ctx.acam, ctx.bcam, ctx.n_cams, ctx.n_dets)
    return kept.tolist(), removed.tolist()


def _canonical_labels(labels):
    """Relabel arbitrary component ids to 0..k-1 in first-occurrence order."""
    uniq, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return rank[inv]


def _split_components(comp):
    """Canonical label array -> member-index lists, each ascending."""
    if not len(comp):
        return []
    idx = np.argsort(comp, kind="stable")
    bounds = (np.flatnonzero(np.diff(comp[idx])) + 1).tolist()
    flat = idx.tolist()
    return [flat[a:b] for a, b in zip([0] + bounds, bounds + [len(flat)])]


def _linked_labels(dist, delta):
    adj = dist < delta
    np.fill_diagonal(adj, False)
    _, labels = connected_components(csr_matrix(adj), directed=False)
    return labels


def _linked_components(dist, delta):
    return _split_components(_canonical_labels(_linked_labels(dist, delta)))


def _carve_clusters(components, ctx, dist, singletons=True):
    """Strip components conflict-free, then claim detections greedily.

    Units (stripped groups plus each removed proposal as a singleton) are
    walked in priority order; every unit keeps the members whose detections
    are still unclaimed. Every multi-proposal unit outranks every singleton
    (its -proposals key is smaller), so groups and singletons sort
    separately: groups by their cached priority, singletons by smallest
    source with emission order breaking ties, exactly the order one global
    stable sort would give. All bookkeeping runs on the ctx's integer ids.

    singletons=False drops the single-proposal clusters from the output;
    they claim strictly after every group, so the groups are unaffected.
    """
    src_a, src_b = ctx.src_a, ctx.src_b
    strip_c = ctx.strip
    groups = []   # (priority, members) for kept units of two or more
    singles = []  # proposal index per singleton unit, in emission order
    for comp in components:
        if len(comp) == 1:
            singles.append(comp[0])
            continue
        key = tuple(comp)
        got = strip_c.get(key)
        if got is None:
            kept, removed = _strip_conflicts(comp, ctx, dist)
            got = strip_c[key] = (
                kept, removed, ctx.prio(kept) if len(kept) > 1 else None)
        kept, removed, prio = got
        if prio is not None:
            groups.append((prio, kept))
        else:
            singles.append(kept[0])
        singles.extend(removed)

    claimed = bytearray(ctx.n_dets)
    built_c = ctx.built
    proposals = ctx.proposals
    clusters = []
    groups.sort(key=_PRIO_KEY)
    for _, g in groups:
        keep = tuple(i for i in g
                     if not (claimed[src_a[i]] or claimed[src_b[i]]))
        if not keep:
            continue
        for i in keep:
            claimed[src_a[i]] = claimed[src_b[i]] = 1
        built = built_c.get(keep)
        if built is None:
            built = built_c[keep] = Cluster.from_proposals(
                proposals[i] for i in keep)
        clusters.append(built)
    if not singletons:
        return clusters
    order = np.argsort(np.fromiter((src_a[i] for i in singles),
                                   np.int64, len(singles)), kind="stable")
    for u in order.tolist():
        i = singles[u]
        a, b = src_a[i], src_b[i]
        if claimed[a] or claimed[b]:
            continue
        claimed[a] = claimed[b] = 1
        keep = (i,)
        built = built_c.get(keep)
        if built is None:
            built = built_c[keep] = Cluster.from_proposals(
                proposals[i] for i in keep)
        clusters.append(built)
    return clusters


def cluster_proposals(proposals, delta, dist=None):
    """Single-linkage clustering at radius delta with conflict resolution.

    Components are carved conflict-free by repeatedly dropping the member
    with the highest mean distance to the rest; each dropped proposal is
    kept as a singleton cluster (a 2-camera group, usable only once a track
    seeds it). Output clusters are pairwise disjoint in detections, enforced
    greedily in priority order (more cameras first, then more proposals,
    then smallest source).
    """
    proposals = list(proposals)
    if not proposals:
        return []
    if dist is None:
        dist = pose_distance_matrix(np.stack([p.pose for p in proposals]))
    else:
        dist = np.ascontiguousarray(dist, dtype=np.float64)
    return _carve_clusters(_linked_components(dist, delta),
                           _CarveCtx(proposals), dist)


class ClusterSweep:
    """Clusterings of one proposal set across many radii, sharing work.

    A sweep serving a single radius clusters it directly; the second
    distinct radius triggers a sorted edge list of all pairwise distances
    below the cap. Every radius then selects a prefix of that list, so
    nearby radii extend each other's union-find state instead of
    re-deriving components, radii that induce the same partition share one
    carved result, and repeated groups share stripping and construction
    through the carve caches. Clusters coming out of a sweep are shared
    prototypes: never mutate them.
    """

    _BULK_EDGES = 256  # below this, extending labels edge by edge wins

    def __init__(self, proposals, dist, delta_cap, singletons=True):
        self.proposals = list(proposals)
        self.dist = np.ascontiguousarray(dist, dtype=np.float64)
        self._cap = float(delta_cap)
        self._singletons = singletons
        self._edge_d = None
        self._edge_i = None
        self._edge_j = None
        self._labels = None
        self._first = {}  # single radius served before the edge list exists
        self._carved = {}
        self._by_token = {}
        self._ctx = _CarveCtx(self.proposals)

    def _edge_list(self):
        if self._edge_d is None:
            n = len(self.proposals)
            iu, ju = np.triu_indices(n, 1)
            d = self.dist[iu, ju]
            keep = d < self._cap
            order = np.argsort(d[keep], kind="stable")
            self._edge_d = d[keep][order]
            self._edge_i = iu[keep][order]
            self._edge_j = ju[keep][order]
            self._labels = {0: np.arange(n, dtype=np.int64)}
        return self._edge_d

    def key_for(self, delta) -> int:
        """Edge-count key; radii with equal keys give equal clusterings."""
        if delta > self._cap:
            raise ValueError(f"radius {delta} beyond sweep cap {self._cap}")
        return int(np.searchsorted(self._edge_list(), delta, side="left"))

    def preload(self, deltas):
        """Visit keys ascending so each extends the previous snapshot."""
        for key in sorted({self.key_for(d) for d in deltas}):
            self._labels_for(key)

    def _labels_for(self, key):
        got = self._labels.get(key)
        if got is None:
            base = max(k for k in self._labels if k <= key)
            labels = self._labels[base]
            if base == 0 and key > self._BULK_EDGES:
                n = len(labels)
                graph = csr_matrix(
                    (np.ones(key, dtype=np.int8),
                     (self._edge_i[:key], self._edge_j[:key])), shape=(n, n))
                _, labels = connected_components(graph, directed=False)
                got = labels.astype(np.int64)
            else:
                got = labels.copy()
                for e in range(base, key):
                    a, b = got[self._edge_i[e]], got[self._edge_j[e]]
                    if a != b:
                        got[got == b] = a
            self._labels[key] = got
        return got

    def clusters(self, delta):
        """Carved clusters at one radius, as a shared prototype tuple."""
        if self._edge_d is None:
            got = self._first.get(delta)
            if got is not None:
                return got
            if not self._first:
                if delta > self._cap:
                    raise ValueError(
                        f"radius {delta} beyond sweep cap {self._cap}")
                comp = _canonical_labels(_linked_labels(self.dist, delta))
                got = self._first[delta] = self._carve_token(comp)
                return got
        key = self.key_for(delta)
        got = self._carved.get(key)
        if got is None:
            got = self._carved[key] = self._carve_token(
                _canonical_labels(self._labels_for(key)))
        return got

    def _carve_token(self, comp):
        token = comp.tobytes()
        got = self._by_token.get(token)
        if got is None:
            got = tuple(_carve_clusters(
                _split_components(comp), self._ctx, self.dist,
                self._singletons))
            self._by_token[token] = got
        return got


# ---------------------------------------------------------------------------
# association

def assign_clusters(clusters, tracks, delta_tracking, forced=None, cost=None,
                    blocked=frozenset()):
    """One-to-one cluster-track assignment gated by delta_tracking.

    Pure decision core shared by associate_tracks and the per-frame search;
    returns {track_id: cluster index} and mutates nothing. Forced seeds go
    first (smallest track id wins a contested cluster); the rest is a
    minimum-cost matching on pose distance. blocked indices never receive a
    track; cost may carry a precomputed (clusters x tracks) pose-distance
    matrix, built on demand otherwise.
    """
    assigned = {}
    taken = set(blocked)
    if forced:
        for tid in sorted(forced):
            det = forced[tid]
            holder = next((k for k, c in enumerate(clusters)
                           if det in c.detections), None)
            if holder is not None and holder not in taken:
                assigned[tid] = holder
                taken.add(holder)

    free_c = [k for k in range(len(clusters)) if k not in taken]
    free_t = [j for j, t in enumerate(tracks) if t.track_id not in assigned]
    if free_c and free_t:
        if cost is None:
            cost = pose_distance_cross(
                np.stack([c.mean_pose for c in clusters]),
                np.stack([t.last_pose for t in tracks]))
        sub = cost[np.ix_(free_c, free_t)]
        gated = np.where(sub < delta_tracking, sub, _FAR)
        rows, cols = linear_sum_assignment(gated)
        for i, j in zip(rows, cols):
            if gated[i, j] < delta_tracking:
                assigned[tracks[free_t[j]].track_id] = free_c[i]
    return assigned


def associate_tracks(clusters, tracks, delta_tracking, forced=None):
    """Match clusters to live tracks, one-to-one, gated by delta_tracking.

    forced: {track_id: (camera_id, detection_index)} hard constraints; the
    cluster owning a forced detection is seeded with that track before the
    assignment runs (smallest track id wins a contested cluster). Matched
    clusters get seed_track set in place; already-seeded clusters are left
    alone. Returns (clusters, tracks that received no cluster).
    """
    blocked = frozenset(k for k, c in enumerate(clusters)
                        if c.seed_track is not None)
    assigned = assign_clusters(clusters, tracks, delta_tracking, forced,
                               blocked=blocked)
    for tid, k in assigned.items():
        clusters[k].seed_track = tid
    unmatched = [t for t in tracks if t.track_id not in assigned]
    return clusters, unmatched


# ---------------------------------------------------------------------------
# fusion

def fuse_cluster(cluster, cameras, detections, conf_cutoff=DEFAULT_CONF_CUTOFF):
    """Triangulate a cluster's detections into one HandEstimate.

    Per-joint weighted multi-view DLT (weights = keypoint confidences above
    the cutoff); side class by det_conf-weighted vote over side_prob.
    """
    ordered = sorted(cluster.detections)
    dets = [detections[cid][idx] for cid, idx in ordered]
    projs = np.stack([cameras[cid].projection for cid, _ in ordered])
    pixels = np.stack([d.keypoints for d in dets])
    conf = np.stack([d.keypoint_conf for d in dets])
    weights = np.where(conf >= conf_cutoff, conf, 0.0)
    joints = triangulate_weighted_joints(projs, pixels, weights)
    if not np.isfinite(joints).all(axis=1).any():
        raise InsufficientViews("no joint has two usable views")

    total = sum(d.det_conf for d in dets)
    vote = sum(d.det_conf * d.side_prob for d in dets) / total if total > 0 else 0.5
    return HandEstimate(
        pose=joints,
        side=RIGHT if vote >= 0.5 else LEFT,
        side_confidence=abs(vote - 0.5) * 2.0,
        track_id=cluster.seed_track,
        contributing=cluster.detections,
        status=FUSED,
    )
