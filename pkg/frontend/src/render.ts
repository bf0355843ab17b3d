// Pure translation of one camera tile's overlay entries into draw
// commands. No canvas access here: main.ts executes the commands, the
// tests inspect them. Coordinates are payload values times the viewport
// scale and nothing else; the server owns every number shown.

import type {
  MatchedEntry,
  OverlayEntry,
  OverlayMode,
  RawEntry,
  ReprojectedEntry,
} from './api.js';
import { RAW_COLOR, SELECT_COLOR, trackColor } from './colors.js';

export interface Viewport {
  scale: number;
}

export type DrawCommand =
  | { kind: 'clear' }
  | { kind: 'dot'; x: number; y: number; r: number; color: string; alpha: number }
  | { kind: 'bone'; x1: number; y1: number; x2: number; y2: number; color: string }
  | { kind: 'box'; x: number; y: number; w: number; h: number; color: string }
  | { kind: 'ring'; x: number; y: number; r: number; color: string }
  | { kind: 'label'; text: string; x: number; y: number; color: string };

export class SchemaError extends Error {}

// wrist at 0, then four joints per finger in chain order
export const HAND_EDGES: [number, number][] = [
  [0, 1], [1, 2], [2, 3], [3, 4],
  [0, 5], [5, 6], [6, 7], [7, 8],
  [0, 9], [9, 10], [10, 11], [11, 12],
  [0, 13], [13, 14], [14, 15], [15, 16],
  [0, 17], [17, 18], [18, 19], [19, 20],
];

const CONF_CUTOFF = 0.05;

function isPair(value: unknown): value is [number, number] {
  return Array.isArray(value) && value.length >= 2
    && typeof value[0] === 'number' && typeof value[1] === 'number';
}

function checkKps(kps: unknown): [number, number, number][] {
  if (!Array.isArray(kps)) throw new SchemaError('keypoints missing');
  for (const row of kps) {
    if (!isPair(row) || typeof (row as number[])[2] !== 'number') {
      throw new SchemaError('malformed keypoint row');
    }
  }
  return kps as [number, number, number][];
}

function skeleton(points: ([number, number] | null)[], color: string,
                  scale: number, out: DrawCommand[]): void {
  for (const [a, b] of HAND_EDGES) {
    const pa = points[a];
    const pb = points[b];
    if (pa === null || pb === null || pa === undefined || pb === undefined) continue;
    out.push({
      kind: 'bone',
      x1: pa[0] * scale, y1: pa[1] * scale,
      x2: pb[0] * scale, y2: pb[1] * scale,
      color,
    });
  }
  points.forEach((p) => {
    if (p === null || p === undefined) return;
    out.push({ kind: 'dot', x: p[0] * scale, y: p[1] * scale, r: 2.5, color, alpha: 1 });
  });
}

function rawCommands(entries: RawEntry[], scale: number,
                     selected: number | null, out: DrawCommand[]): void {
  for (const entry of entries) {
    if (typeof entry.index !== 'number') throw new SchemaError('raw entry without index');
    const kps = checkKps(entry.kps);
    for (const [u, v, conf] of kps) {
      out.push({
        kind: 'dot', x: u * scale, y: v * scale, r: 2,
        color: RAW_COLOR, alpha: Math.max(0.25, Math.min(1, conf)),
      });
    }
    if (Array.isArray(entry.bbox) && entry.bbox.length === 4) {
      const [x0, y0, x1, y1] = entry.bbox;
      out.push({
        kind: 'box', x: x0 * scale, y: y0 * scale,
        w: (x1 - x0) * scale, h: (y1 - y0) * scale, color: RAW_COLOR,
      });
    }
    if (kps.length > 0) {
      out.push({
        kind: 'label', text: `d${entry.index}`,
        x: kps[0][0] * scale + 6, y: kps[0][1] * scale - 6, color: RAW_COLOR,
      });
    }
    if (selected === entry.index && kps.length > 0) {
      out.push({ kind: 'ring', x: kps[0][0] * scale, y: kps[0][1] * scale, r: 9, color: SELECT_COLOR });
    }
  }
}

function matchedCommands(entries: MatchedEntry[], scale: number,
                         selected: number | null, out: DrawCommand[]): void {
  for (const entry of entries) {
    if (typeof entry.track !== 'number') throw new SchemaError('matched entry without track');
    const kps = checkKps(entry.kps);
    const color = trackColor(entry.track);
    const points = kps.map((row) =>
      row[2] >= CONF_CUTOFF ? [row[0], row[1]] as [number, number] : null);
    skeleton(points, color, scale, out);
    if (kps.length > 0) {
      out.push({
        kind: 'label', text: `#${entry.track}`,
        x: kps[0][0] * scale + 6, y: kps[0][1] * scale - 6, color,
      });
    }
    if (selected === entry.index && kps.length > 0) {
      out.push({ kind: 'ring', x: kps[0][0] * scale, y: kps[0][1] * scale, r: 9, color: SELECT_COLOR });
    }
  }
}

function reprojectedCommands(entries: ReprojectedEntry[], scale: number,
                             out: DrawCommand[]): void {
  for (const entry of entries) {
    if (typeof entry.track !== 'number') throw new SchemaError('overlay entry without track');
    if (!Array.isArray(entry.uv)) throw new SchemaError('overlay entry without uv');
    for (const p of entry.uv) {
      if (p !== null && !isPair(p)) throw new SchemaError('malformed uv row');
    }
    const color = trackColor(entry.track);
    skeleton(entry.uv, color, scale, out);
    const anchor = entry.uv.find((p) => p !== null);
    if (anchor) {
      out.push({
        kind: 'label', text: `#${entry.track}`,
        x: anchor[0] * scale + 6, y: anchor[1] * scale - 6, color,
      });
    }
  }
}

export function tileCommands(mode: OverlayMode, entries: OverlayEntry[],
                             viewport: Viewport,
                             selected: number | null = null): DrawCommand[] {
  if (!Array.isArray(entries)) throw new SchemaError('tile entries not a list');
  const out: DrawCommand[] = [{ kind: 'clear' }];
  const scale = viewport.scale;
  if (mode === 'RAW') {
    rawCommands(entries as RawEntry[], scale, selected, out);
  } else if (mode === 'MATCHED') {
    matchedCommands(entries as MatchedEntry[], scale, selected, out);
  } else {
    reprojectedCommands(entries as ReprojectedEntry[], scale, out);
  }
  return out;
}

// Nearest clickable detection in tile coordinates; RAW and MATCHED
// entries are clickable (they name a concrete detection index), the
// reprojected overlay is not.
export function hitTest(mode: OverlayMode, entries: OverlayEntry[],
                        x: number, y: number, viewport: Viewport,
                        radius = 10): number | null {
  if (mode === 'REPROJECTED') return null;
  let best: number | null = null;
  let bestDist = radius * radius;
  for (const entry of entries as (RawEntry | MatchedEntry)[]) {
    if (!Array.isArray(entry.kps)) continue;
    for (const row of entry.kps) {
      if (!isPair(row)) continue;
      const dx = row[0] * viewport.scale - x;
      const dy = row[1] * viewport.scale - y;
      const d = dx * dx + dy * dy;
      if (d <= bestDist) {
        bestDist = d;
        best = entry.index;
      }
    }
  }
  return best;
}
