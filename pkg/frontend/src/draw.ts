// Canvas backend for the draw-command lists produced by render.ts.
// Kept separate so everything upstream stays testable without a DOM.

import type { DrawCommand } from './render.js';

const BACKDROP = '#14161a';

export function executeCommands(ctx: CanvasRenderingContext2D,
                                commands: DrawCommand[]): void {
  for (const cmd of commands) {
    switch (cmd.kind) {
      case 'clear':
        ctx.globalAlpha = 1;
        ctx.fillStyle = BACKDROP;
        ctx.fillRect(0, 0, ctx.canvas.width, ctx.canvas.height);
        break;
      case 'dot':
        ctx.globalAlpha = cmd.alpha;
        ctx.fillStyle = cmd.color;
        ctx.beginPath();
        ctx.arc(cmd.x, cmd.y, cmd.r, 0, Math.PI * 2);
        ctx.fill();
        ctx.globalAlpha = 1;
        break;
      case 'bone':
        ctx.strokeStyle = cmd.color;
        ctx.lineWidth = 1.5;
        ctx.beginPath();
        ctx.moveTo(cmd.x1, cmd.y1);
        ctx.lineTo(cmd.x2, cmd.y2);
        ctx.stroke();
        break;
      case 'box':
        ctx.strokeStyle = cmd.color;
        ctx.lineWidth = 1;
        ctx.strokeRect(cmd.x, cmd.y, cmd.w, cmd.h);
        break;
      case 'ring':
        ctx.strokeStyle = cmd.color;
        ctx.lineWidth = 2;
        ctx.beginPath();
        ctx.arc(cmd.x, cmd.y, cmd.r, 0, Math.PI * 2);
        ctx.stroke();
        break;
      case 'label':
        ctx.fillStyle = cmd.color;
        ctx.font = '10px ui-monospace, monospace';
        ctx.fillText(cmd.text, cmd.x, cmd.y);
        break;
    }
  }
}
