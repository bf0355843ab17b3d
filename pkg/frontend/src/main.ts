// Console wiring: builds the camera grid, routes every control through
// the service client, and repaints tiles from pushed frame events.

import { ApiError, Client } from './api.js';
import type { FrameEvent, OverlayMode } from './api.js';
import { executeCommands } from './draw.js';
import { SchemaError, hitTest, tileCommands } from './render.js';
import {
  applyCameraMaskAck,
  applyConfigAck,
  applyCursor,
  applyError,
  applyFrameEvent,
  applyOverlayAck,
  applyRunning,
  applySessionCreated,
  applyState,
  beginDraft,
  clearDraft,
  clearError,
  initialModel,
} from './state.js';
import type { ViewModel } from './state.js';

// detector image geometry of the bundled rigs; tiles scale uniformly
const IMG_W = 1920;
const IMG_H = 1080;
const TILE_W = 320;
const TILE_H = (IMG_H * TILE_W) / IMG_W;
const VIEWPORT = { scale: TILE_W / IMG_W };

const params = new URLSearchParams(location.search);
const client = new Client(params.get('api') ?? '');

let model: ViewModel = initialModel();
// overlay mode the current payload was generated under; can lag the
// picker until the next frame event arrives
let payloadMode: OverlayMode = model.overlayMode;
let socket: WebSocket | null = null;

const el = (id: string) => document.getElementById(id) as HTMLElement;
const grid = el('grid');
const banner = el('banner');
const status = el('status');
const draftPanel = el('draft');
const tiles = new Map<string, CanvasRenderingContext2D>();

function setModel(next: ViewModel): void {
  model = next;
  repaint();
}

async function guard(action: () => Promise<void>): Promise<void> {
  try {
    setModel(clearError(model));
    await action();
  } catch (err) {
    if (err instanceof ApiError || err instanceof SchemaError) {
      setModel(applyError(model, err.message));
    } else {
      setModel(applyError(model, `unexpected: ${String(err)}`));
    }
  }
}

// -- grid -------------------------------------------------------------

function buildGrid(): void {
  grid.textContent = '';
  tiles.clear();
  for (const cid of model.cameras) {
    const tile = document.createElement('div');
    tile.className = 'tile';
    tile.dataset.camera = cid;

    const head = document.createElement('div');
    head.className = 'tile-head';
    const name = document.createElement('span');
    name.textContent = cid;
    const toggle = document.createElement('button');
    toggle.textContent = 'reject';
    toggle.onclick = () => guard(async () => {
      const rejected = !model.cameraMask.includes(cid);
      const ack = await client.rejectCamera(model.session!, cid, rejected);
      setModel(applyCameraMaskAck(model, ack.camera_mask));
    });
    head.append(name, toggle);

    const canvas = document.createElement('canvas');
    canvas.width = TILE_W;
    canvas.height = TILE_H;
    canvas.onclick = (ev) => {
      const rect = canvas.getBoundingClientRect();
      const x = (ev.clientX - rect.left) * (TILE_W / rect.width);
      const y = (ev.clientY - rect.top) * (TILE_H / rect.height);
      pickDetection(cid, x, y);
    };

    tile.append(head, canvas);
    grid.append(tile);
    tiles.set(cid, canvas.getContext('2d')!);
  }
}

function repaint(): void {
  banner.textContent = model.error ?? '';
  banner.style.display = model.error ? 'block' : 'none';

  const frame = model.current;
  status.textContent = model.session === null
    ? 'no session'
    : `session ${model.session}` +
      ` · frame ${frame ? frame.frame : '-'} / ${model.frames}` +
      ` · cursor ${model.cursor}` +
      (model.lastAccepted !== null
        ? ` · threshold ${Number(model.lastAccepted).toFixed(3)}`
        : '') +
      (model.endOfSequence ? ' · end' : '') +
      (model.running ? ' · running' : '');

  for (const [cid, ctx] of tiles) {
    const tile = ctx.canvas.parentElement as HTMLElement;
    tile.classList.toggle('rejected', model.cameraMask.includes(cid));
    const entries = frame ? frame.overlay[cid] ?? [] : [];
    const selected = model.draft !== null && model.draft.camera === cid
      ? model.draft.index
      : null;
    try {
      executeCommands(ctx, tileCommands(payloadMode, entries, VIEWPORT, selected));
    } catch (err) {
      if (err instanceof SchemaError) {
        banner.textContent = `overlay payload mismatch: ${err.message}`;
        banner.style.display = 'block';
      } else {
        throw err;
      }
    }
  }
  renderDraft();
  syncControls();
}

// -- override draft ---------------------------------------------------

function pickDetection(cid: string, x: number, y: number): void {
  const frame = model.current;
  if (frame === null || model.session === null) return;
  const entries = frame.overlay[cid] ?? [];
  const index = hitTest(payloadMode, entries, x, y, VIEWPORT);
  if (index === null) {
    setModel(clearDraft(model));
    return;
  }
  setModel(beginDraft(model, cid, index));
}

function renderDraft(): void {
  draftPanel.textContent = '';
  if (model.draft === null) {
    draftPanel.style.display = 'none';
    return;
  }
  draftPanel.style.display = 'flex';
  const { camera, index } = model.draft;
  const title = document.createElement('span');
  title.textContent = `assign ${camera} detection ${index} to:`;
  draftPanel.append(title);
  for (const track of model.liveTracks) {
    const btn = document.createElement('button');
    btn.textContent = `track ${track}`;
    btn.onclick = () => submitOverride(track);
    draftPanel.append(btn);
  }
  const reject = document.createElement('button');
  reject.textContent = 'REJECT';
  reject.onclick = () => submitOverride('REJECT');
  const cancel = document.createElement('button');
  cancel.textContent = 'cancel';
  cancel.onclick = () => setModel(clearDraft(model));
  draftPanel.append(reject, cancel);
}

function submitOverride(track: number | 'REJECT'): void {
  guard(async () => {
    const draft = model.draft;
    const frame = model.current;
    if (draft === null || frame === null || model.session === null) return;
    await client.override(model.session, frame.frame, draft.camera,
                          draft.index, track);
    setModel(clearDraft(model));
    await replayCurrent();
  });
}

// -- stepping ---------------------------------------------------------

function applyStepResult(cursor: number, end: boolean,
                         processed: FrameEvent[]): void {
  let next = applyCursor(model, cursor, end);
  for (const ev of processed) next = applyFrameEvent(next, ev);
  if (processed.length > 0) payloadMode = model.overlayMode;
  setModel(next);
}

async function stepBy(n: number): Promise<void> {
  if (model.session === null) return;
  const result = await client.step(model.session, n);
  applyStepResult(result.cursor, result.end_of_sequence, result.processed);
}

// re-annotate the frame on screen so edits and mode changes take effect
async function replayCurrent(): Promise<void> {
  if (model.current === null) return;
  await stepBy(-1);
  await stepBy(1);
}

// -- controls ---------------------------------------------------------

function syncControls(): void {
  const cfg = model.config;
  for (const key of ['delta_default', 'delta_min', 'delta_max'] as const) {
    const slider = document.getElementById(`p-${key}`) as HTMLInputElement;
    const label = el(`v-${key}`);
    if (typeof cfg[key] === 'number' && document.activeElement !== slider) {
      slider.value = String(cfg[key]);
      label.textContent = Number(cfg[key]).toFixed(3);
    }
  }
  for (const key of ['mode', 'criterion'] as const) {
    const select = document.getElementById(`p-${key}`) as HTMLSelectElement;
    if (typeof cfg[key] === 'string') select.value = cfg[key] as string;
  }
  (document.getElementById('overlay-mode') as HTMLSelectElement).value =
    model.overlayMode;
}

function bindControls(): void {
  el('open').onclick = () => guard(async () => {
    const manifest = (document.getElementById('manifest') as HTMLInputElement).value.trim();
    const info = await client.createSession(manifest);
    setModel(applySessionCreated(model, info));
    buildGrid();
    await attach(info.id);
  });

  const steps: [string, number][] = [
    ['back10', -10], ['back1', -1], ['fwd1', 1], ['fwd10', 10]];
  for (const [id, n] of steps) {
    el(id).onclick = () => guard(() => stepBy(n));
  }

  el('play').onclick = () => guard(async () => {
    if (model.session === null) return;
    setModel(applyRunning(model, true));
    try {
      // frames arrive over the socket while this call runs
      const done = await client.run(model.session);
      setModel(applyCursor(model, done.cursor,
                           done.cursor >= model.frames));
    } finally {
      setModel(applyRunning(model, false));
    }
  });
  el('pause').onclick = () => guard(async () => {
    if (model.session === null) return;
    await client.pause(model.session);
    setModel(applyRunning(model, false));
  });

  for (const key of ['delta_default', 'delta_min', 'delta_max']) {
    const slider = document.getElementById(`p-${key}`) as HTMLInputElement;
    slider.onchange = () => guard(async () => {
      if (model.session === null) return;
      const ack = await client.setParams(model.session,
                                         { [key]: Number(slider.value) });
      setModel(applyConfigAck(model, ack));
    });
  }
  for (const key of ['mode', 'criterion']) {
    const select = document.getElementById(`p-${key}`) as HTMLSelectElement;
    select.onchange = () => guard(async () => {
      if (model.session === null) return;
      const ack = await client.setParams(model.session, { [key]: select.value });
      setModel(applyConfigAck(model, ack));
    });
  }

  const overlay = document.getElementById('overlay-mode') as HTMLSelectElement;
  overlay.onchange = () => guard(async () => {
    if (model.session === null) return;
    const ack = await client.setOverlay(model.session,
                                        overlay.value as OverlayMode);
    setModel(applyOverlayAck(model, ack.overlay));
    await replayCurrent();
  });

  el('export').onclick = () => guard(async () => {
    if (model.session === null) return;
    const text = await client.exportAnnotations(model.session);
    const blob = new Blob([text], { type: 'application/jsonl' });
    const link = document.createElement('a');
    link.href = URL.createObjectURL(blob);
    link.download = `${model.session}-annotations.jsonl`;
    link.click();
    URL.revokeObjectURL(link.href);
  });
}

// -- session attach ---------------------------------------------------

async function attach(sid: string): Promise<void> {
  socket?.close();
  socket = client.stream(sid, (ev) => {
    if (ev.type !== 'frame') return;
    payloadMode = model.overlayMode;
    setModel(applyFrameEvent(model, ev));
  });
  const doc = await client.state(sid);
  setModel(applyState(model, doc));
  payloadMode = doc.overlay;
  buildGrid();
  // the view is a pure function of server state: re-deriving the
  // current frame after a reload reproduces it exactly
  if (doc.cursor > 0) await replayHead();
  repaint();
}

async function replayHead(): Promise<void> {
  await stepBy(-1);
  await stepBy(1);
}

function boot(): void {
  bindControls();
  const sid = params.get('session');
  if (sid !== null) {
    guard(() => attach(sid));
  }
  repaint();
}

boot();
