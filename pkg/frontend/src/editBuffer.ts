/** Locally painted pixels awaiting propagation. */

import type { EditOp } from "./api.js";

export type Rgb = [number, number, number];

export interface PaintedPixel {
  x: number;
  y: number;
  color: Rgb; // components in [0, 1]
}

/** ITU-R 601 luma, matching the grayscale image loader convention. */
export function luma([r, g, b]: Rgb): number {
  return 0.299 * r + 0.587 * g + 0.114 * b;
}

/** Parse an HTML color-input value like "#3a7f00" into unit RGB. */
export function hexToRgb(hex: string): Rgb {
  const m = /^#?([0-9a-fA-F]{6})$/.exec(hex);
  if (!m) throw new Error(`bad hex color: ${hex}`);
  const n = parseInt(m[1], 16);
  return [((n >> 16) & 0xff) / 255, ((n >> 8) & 0xff) / 255, (n & 0xff) / 255];
}

export class EditBuffer {
  private marks = new Map<number, PaintedPixel>();

  constructor(
    readonly width: number,
    readonly height: number,
    readonly channels: number,
  ) {}

  /** Stamp a brush (1x1 or 3x3) at (x, y); later paints win per pixel. */
  paint(x: number, y: number, color: Rgb, brush: 1 | 3 = 1): void {
    const reach = brush === 3 ? 1 : 0;
    for (let dy = -reach; dy <= reach; dy++) {
      for (let dx = -reach; dx <= reach; dx++) {
        const px = x + dx;
        const py = y + dy;
        if (px < 0 || px >= this.width || py < 0 || py >= this.height) continue;
        this.marks.set(py * this.width + px, { x: px, y: py, color });
      }
    }
  }

  clear(): void {
    this.marks.clear();
  }

  get isEmpty(): boolean {
    return this.marks.size === 0;
  }

  get size(): number {
    return this.marks.size;
  }

  pixels(): PaintedPixel[] {
    return [...this.marks.values()];
  }

  /**
   * Expand painted pixels into per-channel edit operations: grayscale
   * models receive the luma of the chosen color, RGB models one op per
   * channel.
   */
  toEdits(): EditOp[] {
    const ops: EditOp[] = [];
    for (const mark of this.marks.values()) {
      if (this.channels === 1) {
        ops.push({ x: mark.x, y: mark.y, c: 0, value: luma(mark.color) });
      } else {
        for (let c = 0; c < this.channels; c++) {
          ops.push({ x: mark.x, y: mark.y, c, value: mark.color[c] ?? 0 });
        }
      }
    }
    return ops;
  }
}
