// Track colors come from a stable hash of the track id, so a track
// keeps one color across every tile and every frame of the session.

const GOLDEN_ANGLE = 137.50776405003785;

function fnv1a(key: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < key.length; i++) {
    h ^= key.charCodeAt(i);
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h >>> 0;
}

export function trackColor(track: number): string {
  // golden-angle spacing keeps consecutive ids visually far apart
  const hue = (fnv1a(`track:${track}`) % 360 + track * GOLDEN_ANGLE) % 360;
  return `hsl(${Math.round(hue)}, 78%, 55%)`;
}

export const RAW_COLOR = 'hsl(0, 0%, 72%)';
export const SELECT_COLOR = 'hsl(48, 100%, 60%)';
