// Typed client for the annotation service. Every pipeline-affecting
// action in the console goes through this module; nothing is computed
// client-side.

export type OverlayMode = 'RAW' | 'MATCHED' | 'REPROJECTED';

export interface RawEntry {
  index: number;
  kps: [number, number, number][];
  bbox: number[];
  side: number;
  conf: number;
}

export interface MatchedEntry {
  index: number;
  track: number;
  kps: [number, number, number][];
}

export interface ReprojectedEntry {
  track: number;
  uv: ([number, number] | null)[];
}

export type OverlayEntry = RawEntry | MatchedEntry | ReprojectedEntry;
export type OverlayPayload = Record<string, OverlayEntry[]>;

export interface OverrideRecord {
  camera: string;
  index: number;
  track: number | 'REJECT';
}

export interface HandRecord {
  track: number;
  side: string;
  side_conf: number;
  status: string;
  joints: ([number, number, number] | null)[];
  sources: [string, number][];
  interp?: number[];
}

export interface AnnotationRecord {
  frame: number;
  threshold: number;
  hands: HandRecord[];
  overrides?: OverrideRecord[];
}

export interface FrameEvent {
  type: 'frame';
  frame: number;
  cursor: number;
  end_of_sequence: boolean;
  annotation: AnnotationRecord;
  overlay: OverlayPayload;
}

export interface SessionInfo {
  id: string;
  frames: number;
  cursor: number;
  cameras: string[];
}

export interface TrackInfo {
  track: number;
  side: string;
  frames_since_update: number;
}

export interface StateDoc {
  id: string;
  cursor: number;
  frames: number;
  mode: string;
  overlay: OverlayMode;
  end_of_sequence: boolean;
  cameras: string[];
  camera_mask: string[];
  config: Record<string, unknown>;
  last_accepted: number;
  live_tracks: TrackInfo[];
}

export interface StepResult {
  cursor: number;
  mode: string;
  end_of_sequence: boolean;
  processed: FrameEvent[];
}

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

async function parseError(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const doc = await resp.json();
    if (typeof doc.detail === 'string') detail = doc.detail;
  } catch {
    // non-JSON error body, keep the status text
  }
  throw new ApiError(resp.status, detail);
}

export class Client {
  constructor(readonly base: string = '') {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await fetch(this.base + path, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!resp.ok) await parseError(resp);
    return resp.json();
  }

  async createSession(manifest: string, config: Record<string, unknown> = {},
                      detections?: string): Promise<SessionInfo> {
    const body: Record<string, unknown> = { manifest, config };
    if (detections) body.detections = detections;
    return this.post('/v1/sessions', body);
  }

  async state(sid: string): Promise<StateDoc> {
    const resp = await fetch(`${this.base}/v1/sessions/${sid}/state`);
    if (!resp.ok) await parseError(resp);
    return resp.json();
  }

  step(sid: string, n: number): Promise<StepResult> {
    return this.post(`/v1/sessions/${sid}/step`, { n });
  }

  run(sid: string): Promise<{ cursor: number; processed: number }> {
    return this.post(`/v1/sessions/${sid}/run`, {});
  }

  pause(sid: string): Promise<{ cursor: number; mode: string }> {
    return this.post(`/v1/sessions/${sid}/pause`, {});
  }

  setParams(sid: string, changes: Record<string, unknown>):
      Promise<Record<string, unknown>> {
    return this.post(`/v1/sessions/${sid}/params`, changes);
  }

  setOverlay(sid: string, mode: OverlayMode): Promise<{ overlay: OverlayMode }> {
    return this.post(`/v1/sessions/${sid}/overlay`, { mode });
  }

  rejectCamera(sid: string, cid: string, rejected: boolean):
      Promise<{ camera_mask: string[] }> {
    return this.post(`/v1/sessions/${sid}/cameras/${cid}/reject`, { rejected });
  }

  override(sid: string, frame: number, camera: string, index: number,
           track: number | 'REJECT'): Promise<{ staged: number }> {
    return this.post(`/v1/sessions/${sid}/override`,
                     { frame, camera, index, track });
  }

  async exportAnnotations(sid: string): Promise<string> {
    const resp = await fetch(`${this.base}/v1/sessions/${sid}/export`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: '{}',
    });
    if (!resp.ok) await parseError(resp);
    return resp.text();
  }

  stream(sid: string, onEvent: (ev: FrameEvent) => void): WebSocket {
    const url = new URL(`/v1/sessions/${sid}/stream`,
                        this.base || location.href);
    url.protocol = url.protocol === 'https:' ? 'wss:' : 'ws:';
    const ws = new WebSocket(url.toString());
    ws.onmessage = (msg) => {
      try {
        onEvent(JSON.parse(msg.data));
      } catch {
        // malformed push, ignore; the next step response resyncs
      }
    };
    return ws;
  }
}
