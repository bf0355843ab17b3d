"""Region-growing threshold search and the three per-frame selection criteria.

NS clusters once at the default radius. CD walks candidate radii outward
from the last accepted one and stops at the first that covers every hand.
REPR sweeps all candidates, pools large-enough clusters per track, and keeps
the reprojection-error minimizer.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .clustering import (
    CARRIED_FORWARD,
    ClusterSweep,
    HandEstimate,
    assign_clusters,
    build_proposals,
    fuse_cluster,
    pose_distance,
    pose_distance_cross,
    pose_distance_matrix,
)
from .errors import ConfigError, InsufficientViews
from .geometry import DEFAULT_CONF_CUTOFF, reprojection_error

DM = "DM"
TM = "TM"
NS = "NS"
CD = "CD"
REPR = "REPR"
AUTO = "AUTO"


@dataclass(frozen=True)
class SearchConfig:
    """Matching mode, selection criterion, and search-range parameters."""

    mode: str = DM
    criterion: str = NS
    delta_default: float = 0.05
    delta_min: float = 0.005
    delta_max: float = 0.25
    step: float = 0.005
    max_offsets: int = 20
    cluster_size_min: int = 3
    expected_hands: int | str = AUTO
    conf_cutoff: float = DEFAULT_CONF_CUTOFF
    max_coast: int = 30

    def __post_init__(self):
        if self.mode not in (DM, TM):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.criterion not in (NS, CD, REPR):
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if not (0.0 < self.delta_min <= self.delta_default <= self.delta_max):
            raise ConfigError("need 0 < delta_min <= delta_default <= delta_max")
        if self.step <= 0.0:
            raise ConfigError("step must be positive")
        if self.max_offsets < 0 or self.cluster_size_min < 1 or self.max_coast < 0:
            raise ConfigError("counts must be non-negative (cluster_size_min >= 1)")
        if self.expected_hands != AUTO and int(self.expected_hands) < 0:
            raise ConfigError("expected_hands must be AUTO or a non-negative count")


@dataclass
class FrameSelection:
    """Outcome of one criterion on one frame.

    per_hand maps every live track to its chosen cluster or None (a miss);
    new_clusters are unassigned DM-valid clusters eligible to spawn tracks.
    """

    accepted_threshold: float
    per_hand: dict
    criterion_cost: dict
    searched_offsets: int
    new_clusters: list = field(default_factory=list)


def candidate_thresholds(last_accepted: float, config: SearchConfig) -> list:
    """[d0, d0-s, d0+s, d0-2s, ...] clamped to bounds, first occurrence kept."""
    lo, hi = config.delta_min, config.delta_max
    out = [min(max(last_accepted, lo), hi)]
    for k in range(1, config.max_offsets + 1):
        for v in (last_accepted - k * config.step, last_accepted + k * config.step):
            v = min(max(v, lo), hi)
            if v not in out:
                out.append(v)
    return out


@dataclass(frozen=True)
class Association:
    """Clusters at one radius plus the track assignment made at it.

    clusters are shared prototypes (never mutated); assigned maps each
    matched track id to its cluster's index in that tuple.
    """

    clusters: tuple
    assigned: dict


class FrameContext:
    """One frame's detections plus memoized per-frame derived data.

    Proposals and the pose-distance matrix are threshold-independent, so
    they are computed once; clusterings come from a shared radius sweep
    (radii with the same edge prefix reuse one carved result), assignments
    are cached per radius on top of a per-clustering cost matrix, and
    fusion / reprojection cost are cached by detection set.
    """

    def __init__(self, cameras, detections, tracks, config, forced=None,
                 proposals=None, dist=None):
        self.cameras = cameras
        self.detections = detections
        self.tracks = list(tracks)
        self.config = config
        self.forced = dict(forced or {})
        self._proposals = proposals
        self._dist = dist
        self._sweep = None
        self._assoc = {}
        self._gates = {}
        self._fused = {}
        self._costs = {}

    @property
    def proposals(self):
        if self._proposals is None:
            self._proposals = build_proposals(self.detections, self.cameras,
                                              self.config.conf_cutoff)
        return self._proposals

    @property
    def dist(self):
        if self._dist is None:
            props = self.proposals
            if props:
                self._dist = pose_distance_matrix(np.stack([p.pose for p in props]))
            else:
                self._dist = np.zeros((0, 0))
        return self._dist

    @property
    def sweep(self) -> ClusterSweep:
        if self._sweep is None:
            # singleton clusters are unreachable in DM mode: they cannot
            # enter the assignment pool, seed a track, or found a new hand
            self._sweep = ClusterSweep(self.proposals, self.dist,
                                       self.config.delta_max,
                                       singletons=self.config.mode == TM)
        return self._sweep

    def prepare(self, deltas):
        """Warm the sweep for a candidate walk (cheapest visited in order)."""
        if self.proposals:
            self.sweep.preload(deltas)

    def clusters_at(self, delta):
        """Prototype clusters (never mutated) for one radius."""
        if not self.proposals:
            return ()
        return self.sweep.clusters(delta)

    def _pool_and_gate(self, clusters):
        """Assignment-eligible cluster indices plus their track distances.

        In DM mode only DM-valid clusters enter the assignment (2-camera
        groups can never be used); in TM mode every cluster is a candidate
        because assignment itself is what makes a 2-camera group valid.
        The distance matrix depends only on the clustering, so it is keyed
        by the carved tuple's identity and shared across the radii that
        induce it.
        """
        key = id(clusters)
        got = self._gates.get(key)
        if got is None:
            if self.config.mode == TM:
                pool = tuple(range(len(clusters)))
            else:
                pool = tuple(k for k, c in enumerate(clusters) if c.dm_valid())
            if pool and self.tracks:
                cost = pose_distance_cross(
                    np.stack([clusters[k].mean_pose for k in pool]),
                    np.stack([t.last_pose for t in self.tracks]))
            else:
                cost = np.zeros((len(pool), len(self.tracks)))
            got = self._gates[key] = (pool, cost)
        return got

    def associate(self, delta) -> Association:
        """Memoized assignment of tracks to clusters at one radius."""
        got = self._assoc.get(delta)
        if got is None:
            clusters = self.clusters_at(delta)
            if clusters:
                pool, cost = self._pool_and_gate(clusters)
                picked = assign_clusters([clusters[k] for k in pool],
                                         self.tracks, delta, self.forced,
                                         cost=cost)
                got = Association(clusters,
                                  {tid: pool[k] for tid, k in picked.items()})
            else:
                got = Association((), {})
            self._assoc[delta] = got
        return got

    def fused(self, cluster):
        """Memoized fusion prototype for a detection set; None if it fails."""
        key = cluster.detections
        if key not in self._fused:
            try:
                self._fused[key] = fuse_cluster(cluster, self.cameras,
                                                self.detections, self.config.conf_cutoff)
            except InsufficientViews:
                self._fused[key] = None
        return self._fused[key]

    def cost(self, cluster) -> float:
        """Memoized reprojection error of the fused cluster."""
        key = cluster.detections
        if key not in self._costs:
            est = self.fused(cluster)
            if est is None:
                self._costs[key] = float("inf")
            else:
                matched = [(self.cameras[cid], self.detections[cid][i])
                           for cid, i in sorted(key)]
                self._costs[key] = reprojection_error(est.pose, matched,
                                                      self.config.conf_cutoff)
        return self._costs[key]


def _unassigned_new(assoc: Association):
    taken = set(assoc.assigned.values())
    return [c for k, c in enumerate(assoc.clusters)
            if k not in taken and c.dm_valid()]


def _selection(ctx, delta, offsets, assoc: Association):
    per_hand, costs = {}, {}
    for t in ctx.tracks:
        k = assoc.assigned.get(t.track_id)
        if k is None:
            per_hand[t.track_id] = None
            costs[t.track_id] = float("inf")
        else:
            c = assoc.clusters[k]
            per_hand[t.track_id] = c
            costs[t.track_id] = pose_distance(c.mean_pose, t.last_pose)
    return FrameSelection(delta, per_hand, costs, offsets,
                          _unassigned_new(assoc))


def select_ns(ctx: FrameContext) -> FrameSelection:
    """No search: one clustering at the default radius."""
    delta = ctx.config.delta_default
    return _selection(ctx, delta, 0, ctx.associate(delta))


def select_cd(ctx: FrameContext, last_accepted: float) -> FrameSelection:
    """Stop at the first candidate radius that covers every expected hand;
    otherwise fall back to the smallest radius with maximum coverage."""
    cfg = ctx.config
    auto = cfg.expected_hands == AUTO
    expected = len(ctx.tracks) if auto else int(cfg.expected_hands)
    cands = candidate_thresholds(last_accepted, cfg)
    ctx.prepare(cands)
    best = None
    for idx, delta in enumerate(cands):
        assoc = ctx.associate(delta)
        covered = len(assoc.assigned)
        if not auto:
            covered += len(_unassigned_new(assoc))
        if covered >= expected:
            return _selection(ctx, delta, idx, assoc)
        if best is None or covered > best[0] or (covered == best[0] and delta < best[2]):
            best = (covered, idx, delta)
    _, idx, delta = best
    return _selection(ctx, delta, idx, ctx.associate(delta))


def select_repr(ctx: FrameContext, last_accepted: float) -> FrameSelection:
    """Sweep every candidate radius; per track keep the member of C_large
    (assigned, valid, enough proposals) with minimal reprojection error."""
    cfg = ctx.config
    cands = candidate_thresholds(last_accepted, cfg)
    ctx.prepare(cands)
    pools = {t.track_id: {} for t in ctx.tracks}
    for idx, delta in enumerate(cands):
        assoc = ctx.associate(delta)
        for tid, k in assoc.assigned.items():
            c = assoc.clusters[k]
            if len(c.proposals) < cfg.cluster_size_min:
                continue
            pools[tid].setdefault(c.detections, (idx, delta, c))

    per_hand, costs, chosen_delta = {}, {}, {}
    for t in ctx.tracks:
        tid = t.track_id
        best = None
        for dets_fs, (idx, delta, c) in sorted(pools[tid].items(),
                                               key=lambda kv: kv[1][0]):
            cost = ctx.cost(c)
            if not np.isfinite(cost):
                continue
            if best is None or cost < best[0]:
                best = (cost, delta, c)
        if best is None:
            per_hand[tid] = None
            costs[tid] = float("inf")
        else:
            per_hand[tid] = best[2]
            costs[tid] = best[0]
            chosen_delta[tid] = best[1]

    if chosen_delta:
        votes = Counter(chosen_delta.values())
        top = max(votes.values())
        accepted = min(d for d, v in votes.items() if v == top)
    else:
        accepted = cands[0]

    used = set()
    for c in per_hand.values():
        if c is not None:
            used |= c.detections
    new = [c for c in _unassigned_new(ctx.associate(accepted))
           if c.detections.isdisjoint(used)]
    return FrameSelection(accepted, per_hand, costs, len(cands) - 1, new)


def run_criterion(ctx: FrameContext, last_accepted: float) -> FrameSelection:
    if ctx.config.criterion == NS:
        return select_ns(ctx)
    if ctx.config.criterion == CD:
        return select_cd(ctx, last_accepted)
    return select_repr(ctx, last_accepted)


def fallback(tracks, selection: FrameSelection, config: SearchConfig):
    """Carry missed tracks forward; retire those past the coast budget.

    Returns ({track_id: CARRIED_FORWARD estimate}, {retired track_id}).
    """
    carried, retired = {}, set()
    for t in tracks:
        if selection.per_hand.get(t.track_id) is not None:
            continue
        if t.frames_since_update + 1 > config.max_coast:
            retired.add(t.track_id)
            continue
        carried[t.track_id] = HandEstimate(
            pose=t.last_pose.copy(), side=t.side,
            side_confidence=t.side_confidence, track_id=t.track_id,
            contributing=frozenset(), status=CARRIED_FORWARD,
        )
    return carried, retired
