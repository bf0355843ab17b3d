// The console's view model and its reducers. Reducers are pure and run
// only on server responses or pushed events, so the view always shows
// acknowledged state; the one local field is the override draft, which
// is a selection, not an annotation value.

import type { FrameEvent, OverlayMode, SessionInfo, StateDoc } from './api.js';

export interface OverrideDraft {
  camera: string;
  index: number;
}

export interface ViewModel {
  session: string | null;
  frames: number;
  cursor: number;
  endOfSequence: boolean;
  running: boolean;
  cameras: string[];
  cameraMask: string[];
  overlayMode: OverlayMode;
  config: Record<string, unknown>;
  lastAccepted: number | null;
  liveTracks: number[];
  current: FrameEvent | null;
  draft: OverrideDraft | null;
  error: string | null;
}

export function initialModel(): ViewModel {
  return {
    session: null,
    frames: 0,
    cursor: 0,
    endOfSequence: false,
    running: false,
    cameras: [],
    cameraMask: [],
    overlayMode: 'MATCHED',
    config: {},
    lastAccepted: null,
    liveTracks: [],
    current: null,
    draft: null,
    error: null,
  };
}

export function applySessionCreated(m: ViewModel, info: SessionInfo): ViewModel {
  return {
    ...initialModel(),
    session: info.id,
    frames: info.frames,
    cursor: info.cursor,
    cameras: [...info.cameras],
    overlayMode: m.overlayMode,
  };
}

export function applyState(m: ViewModel, doc: StateDoc): ViewModel {
  return {
    ...m,
    session: doc.id,
    frames: doc.frames,
    cursor: doc.cursor,
    endOfSequence: doc.end_of_sequence,
    cameras: [...doc.cameras],
    cameraMask: [...doc.camera_mask],
    overlayMode: doc.overlay,
    config: { ...doc.config },
    lastAccepted: doc.last_accepted,
    liveTracks: doc.live_tracks.map((t) => t.track),
  };
}

export function applyFrameEvent(m: ViewModel, ev: FrameEvent): ViewModel {
  return {
    ...m,
    cursor: ev.cursor,
    endOfSequence: ev.end_of_sequence,
    current: ev,
    lastAccepted: ev.annotation.threshold,
    liveTracks: ev.annotation.hands.map((h) => h.track),
    error: null,
  };
}

export function applyCursor(m: ViewModel, cursor: number,
                            endOfSequence: boolean): ViewModel {
  const current = m.current !== null && m.current.frame < cursor
    ? m.current
    : null;
  return { ...m, cursor, endOfSequence, current };
}

export function applyConfigAck(m: ViewModel,
                               config: Record<string, unknown>): ViewModel {
  return { ...m, config: { ...config } };
}

export function applyOverlayAck(m: ViewModel, mode: OverlayMode): ViewModel {
  return { ...m, overlayMode: mode };
}

export function applyCameraMaskAck(m: ViewModel, mask: string[]): ViewModel {
  return { ...m, cameraMask: [...mask] };
}

export function applyRunning(m: ViewModel, running: boolean): ViewModel {
  return { ...m, running };
}

export function beginDraft(m: ViewModel, camera: string,
                           index: number): ViewModel {
  return { ...m, draft: { camera, index } };
}

export function clearDraft(m: ViewModel): ViewModel {
  return { ...m, draft: null };
}

export function applyError(m: ViewModel, message: string): ViewModel {
  return { ...m, error: message };
}

export function clearError(m: ViewModel): ViewModel {
  return { ...m, error: null };
}
