"""Stateful annotation sessions over HTTP and WebSocket.

One session wraps one detection sequence: it owns the pipeline state,
a cursor (the index of the next frame to annotate), and an override
ledger. Forward steps annotate frames; backward steps restore the
nearest retained state snapshot at or before the target and silently
re-annotate up to it, so stepping back and forward again reproduces
the same results bit for bit when nothing was changed in between.

Session-level settings (search parameters, camera mask, staged
overrides, overlay mode) are deliberately not part of snapshots: the
point of stepping back is usually to re-annotate the same frames under
new settings, and a staged override must survive the back-step that
makes its frame reachable again.

Each explicitly processed frame is pushed to WebSocket subscribers as
{"type": "frame", ...} carrying the annotation record (same shape as
the annotation file format) plus an overlay payload:
  RAW          every camera's input detections as given;
  MATCHED      contributing detections only, labeled by track;
  REPROJECTED  fused joints projected into every camera (null for
               joints behind the camera or unresolved).

All mutations of one session are serialized through its lock. run()
yields to the event loop between frames, so a concurrent pause request
on the same session can interrupt it.
"""

import asyncio
import json
from dataclasses import asdict, fields, replace

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from .errors import ConfigError, HandLiftError
from .geometry import project_points
from .io_formats import (
    annotation_record,
    load_calibration,
    load_detections,
    load_manifest,
    write_annotations,
)
from .pipeline import (
    REJECT,
    Override,
    SessionState,
    annotate_frame,
    apply_manual_override,
)
from .search import SearchConfig

RAW = "RAW"
MATCHED = "MATCHED"
REPROJECTED = "REPROJECTED"
_OVERLAYS = (RAW, MATCHED, REPROJECTED)

RUNNING = "RUNNING"
PAUSED = "PAUSED"
STEPPING = "STEPPING"

SNAPSHOT_LIMIT = 600


class CreateSessionRequest(BaseModel):
    manifest: str | None = None
    detections: str = "default"
    config: dict = {}
    snapshot_limit: int = SNAPSHOT_LIMIT


class StepRequest(BaseModel):
    n: int = 1


class ParamsRequest(BaseModel):
    mode: str | None = None
    criterion: str | None = None
    delta_default: float | None = None
    delta_min: float | None = None
    delta_max: float | None = None
    step: float | None = None
    max_offsets: int | None = None
    cluster_size_min: int | None = None
    expected_hands: int | str | None = None
    conf_cutoff: float | None = None
    max_coast: int | None = None


class OverlayRequest(BaseModel):
    mode: str


class RejectRequest(BaseModel):
    rejected: bool = True


class OverrideRequest(BaseModel):
    frame: int
    camera: str
    index: int
    track: int | str


class ExportRequest(BaseModel):
    path: str | None = None


class Session:
    def __init__(self, sid, cameras, frames, config, snapshot_limit):
        self.id = sid
        self.cameras = cameras
        self.frames = frames
        self.state = SessionState(cameras=cameras, config=config)
        self.cursor = 0
        self.mode = PAUSED
        self.overlay = MATCHED
        self.overrides = []
        self.annotations = []
        self.snapshot_limit = max(1, snapshot_limit)
        self.snapshots = {0: self._snapshot()}
        self.subscribers = []
        self.lock = asyncio.Lock()
        self.pause_requested = False

    # -- state snapshots ----------------------------------------------------

    def _snapshot(self):
        state = self.state
        return {
            "tracks": [replace(t, last_pose=t.last_pose.copy())
                       for t in state.tracks],
            "last_accepted": state.last_accepted,
            "next_track_id": state.next_track_id,
        }

    def _store_snapshot(self):
        self.snapshots[self.cursor] = self._snapshot()
        while len(self.snapshots) > self.snapshot_limit + 1:
            # frame 0 stays so any target remains reachable by replay
            evict = min(k for k in self.snapshots if k != 0)
            del self.snapshots[evict]

    def _restore(self, target):
        base = max(k for k in self.snapshots if k <= target)
        snap = self.snapshots[base]
        self.state.tracks = [replace(t, last_pose=t.last_pose.copy())
                             for t in snap["tracks"]]
        self.state.last_accepted = snap["last_accepted"]
        self.state.next_track_id = snap["next_track_id"]
        self.cursor = base
        while self.cursor < target:
            self._process_next(push=False)

    # -- frame processing ---------------------------------------------------

    def _process_next(self, push=True):
        k = self.cursor
        if k >= len(self.frames):
            return None
        self._store_snapshot()
        self.state.pending_overrides = [
            ov for ov in self.overrides if ov.frame_index == k]
        try:
            ann, _ = annotate_frame(self.state, self.frames[k])
        finally:
            self.state.pending_overrides = []
        if len(self.annotations) == k:
            self.annotations.append(ann)
        else:
            self.annotations[k] = ann
        self.cursor = k + 1
        event = {
            "type": "frame",
            "frame": k,
            "cursor": self.cursor,
            "end_of_sequence": self.cursor >= len(self.frames),
            "annotation": annotation_record(ann),
            "overlay": self._overlay_payload(k, ann),
        }
        if push:
            for queue in self.subscribers:
                queue.put_nowait(event)
        return event

    # -- overlays -------------------------------------------------------

    def _overlay_payload(self, k, ann):
        frame = self.frames[k]
        if self.overlay == RAW:
            return {
                cid: [
                    {
                        "index": i,
                        "kps": [[float(u), float(v), float(c)]
                                for (u, v), c in zip(d.keypoints,
                                                     d.keypoint_conf)],
                        "bbox": [float(v) for v in d.bbox],
                        "side": float(d.side_prob),
                        "conf": float(d.det_conf),
                    }
                    for i, d in enumerate(dets)
                ]
                for cid, dets in frame.detections.items()
            }
        if self.overlay == MATCHED:
            out = {cid: [] for cid in frame.detections}
            for est in ann.hands:
                for cid, idx in sorted(est.contributing):
                    det = frame.detections[cid][idx]
                    out[cid].append({
                        "index": idx,
                        "track": est.track_id,
                        "kps": [[float(u), float(v), float(c)]
                                for (u, v), c in zip(det.keypoints,
                                                     det.keypoint_conf)],
                    })
            return out
        out = {}
        for cid, cam in self.cameras.items():
            entries = []
            for est in ann.hands:
                finite = np.isfinite(est.pose).all(axis=1)
                uv, in_front = project_points(cam, np.nan_to_num(est.pose))
                ok = finite & in_front
                entries.append({
                    "track": est.track_id,
                    "uv": [[float(u), float(v)] if good else None
                           for (u, v), good in zip(uv, ok)],
                })
            out[cid] = entries
        return out

    # -- views ----------------------------------------------------------

    def state_doc(self):
        return {
            "id": self.id,
            "cursor": self.cursor,
            "frames": len(self.frames),
            "mode": self.mode,
            "overlay": self.overlay,
            "end_of_sequence": self.cursor >= len(self.frames),
            "cameras": sorted(self.cameras),
            "camera_mask": sorted(self.state.camera_mask),
            "config": asdict(self.state.config),
            "last_accepted": self.state.last_accepted,
            "live_tracks": [
                {
                    "track": t.track_id,
                    "side": t.side,
                    "frames_since_update": t.frames_since_update,
                }
                for t in self.state.tracks
            ],
        }


def create_app(manifest=None, config=None, detections="default") -> FastAPI:
    """Build the service; manifest/config given here become the defaults
    for sessions that do not name their own."""
    app = FastAPI(title="handlift annotation service")
    app.state.default_manifest = manifest
    app.state.default_config = config or SearchConfig()
    app.state.default_detections = detections
    app.state.sessions = {}
    app.state.counter = 0

    @app.exception_handler(HandLiftError)
    async def _domain_error(request, exc):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    def get_session(sid) -> Session:
        session = app.state.sessions.get(sid)
        if session is None:
            raise HTTPException(status_code=404,
                                detail=f"no session {sid!r}")
        return session

    @app.post("/v1/sessions")
    async def create_session(body: CreateSessionRequest):
        if body.manifest is not None:
            manifest = load_manifest(body.manifest)
        elif app.state.default_manifest is not None:
            manifest = app.state.default_manifest
        else:
            raise ConfigError("no manifest given and no default configured")
        name = body.detections or app.state.default_detections
        if name not in manifest.detection_sets:
            raise ConfigError(
                f"no detection set {name!r} in manifest; available: "
                f"{sorted(manifest.detection_sets)}")
        cameras = load_calibration(manifest.calibration)
        frames = list(load_detections(manifest.detection_sets[name]))
        known = {f.name for f in fields(SearchConfig)}
        unknown = sorted(set(body.config) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        config = replace(app.state.default_config, **body.config)
        sid = f"s{app.state.counter}"
        app.state.counter += 1
        session = Session(sid, cameras, frames, config, body.snapshot_limit)
        app.state.sessions[sid] = session
        return {"id": sid, "frames": len(frames), "cursor": 0,
                "cameras": sorted(cameras)}

    @app.get("/v1/sessions/{sid}/state")
    async def get_state(sid: str):
        return get_session(sid).state_doc()

    @app.post("/v1/sessions/{sid}/step")
    async def step(sid: str, body: StepRequest):
        session = get_session(sid)
        async with session.lock:
            session.mode = STEPPING
            processed = []
            try:
                if body.n >= 0:
                    for _ in range(body.n):
                        event = session._process_next()
                        if event is None:
                            break
                        processed.append(event)
                else:
                    session._restore(max(0, session.cursor + body.n))
            finally:
                session.mode = PAUSED
            return {
                "cursor": session.cursor,
                "mode": session.mode,
                "end_of_sequence": session.cursor >= len(session.frames),
                "processed": processed,
            }

    @app.post("/v1/sessions/{sid}/run")
    async def run(sid: str):
        session = get_session(sid)
        session.pause_requested = False
        session.mode = RUNNING
        processed = 0
        try:
            while not session.pause_requested:
                async with session.lock:
                    if session._process_next() is None:
                        break
                    processed += 1
                await asyncio.sleep(0)
        finally:
            session.mode = PAUSED
        return {"cursor": session.cursor, "processed": processed,
                "mode": session.mode}

    @app.post("/v1/sessions/{sid}/pause")
    async def pause(sid: str):
        session = get_session(sid)
        session.pause_requested = True
        session.mode = PAUSED
        return {"cursor": session.cursor, "mode": session.mode}

    @app.post("/v1/sessions/{sid}/params")
    async def set_params(sid: str, body: ParamsRequest):
        session = get_session(sid)
        async with session.lock:
            changes = {k: v for k, v in body.model_dump().items()
                       if v is not None}
            session.state.config = replace(session.state.config, **changes)
            return asdict(session.state.config)

    @app.post("/v1/sessions/{sid}/overlay")
    async def set_overlay(sid: str, body: OverlayRequest):
        session = get_session(sid)
        if body.mode not in _OVERLAYS:
            raise ConfigError(
                f"unknown overlay {body.mode!r}; choose from {_OVERLAYS}")
        session.overlay = body.mode
        return {"overlay": session.overlay}

    @app.post("/v1/sessions/{sid}/cameras/{cid}/reject")
    async def reject_camera(sid: str, cid: str, body: RejectRequest):
        session = get_session(sid)
        async with session.lock:
            if cid not in session.cameras:
                raise ConfigError(f"unknown camera {cid!r}")
            if body.rejected:
                session.state.camera_mask.add(cid)
            else:
                session.state.camera_mask.discard(cid)
            return {"camera_mask": sorted(session.state.camera_mask)}

    @app.post("/v1/sessions/{sid}/override")
    async def override(sid: str, body: OverrideRequest):
        session = get_session(sid)
        async with session.lock:
            track = body.track
            if isinstance(track, str) and track != REJECT:
                raise ConfigError(
                    f"track must be an id or {REJECT!r}, got {track!r}")
            ov = Override(frame_index=body.frame, camera_id=body.camera,
                          detection_index=body.index, track_id=track)
            session.state.pending_overrides = [
                staged for staged in session.overrides
                if staged.frame_index == ov.frame_index]
            try:
                apply_manual_override(session.state, ov)
                if ov not in session.overrides:
                    session.overrides.append(ov)
            finally:
                session.state.pending_overrides = []
            return {"staged": len(session.overrides)}

    @app.post("/v1/sessions/{sid}/export")
    async def export(sid: str, body: ExportRequest):
        session = get_session(sid)
        async with session.lock:
            annotated = session.annotations[:session.cursor]
            if not annotated:
                raise ConfigError("nothing annotated yet")
            if body.path:
                write_annotations(annotated, body.path)
                return {"path": body.path, "frames": len(annotated)}
            lines = "".join(
                json.dumps(annotation_record(a), separators=(",", ":"),
                           allow_nan=False) + "\n"
                for a in annotated)
            return PlainTextResponse(lines)

    @app.websocket("/v1/sessions/{sid}/stream")
    async def stream(ws: WebSocket, sid: str):
        session = app.state.sessions.get(sid)
        if session is None:
            await ws.close(code=4404)
            return
        await ws.accept()
        queue = asyncio.Queue()
        session.subscribers.append(queue)
        try:
            while True:
                await ws.send_json(await queue.get())
        except WebSocketDisconnect:
            pass
        finally:
            session.subscribers.remove(queue)

    return app
