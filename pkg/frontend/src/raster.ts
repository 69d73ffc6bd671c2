/** Client-side polygon fill, bit-identical to the server's rasterizer.
 *
 * Even-odd scanline rule sampled at pixel centers (x + 0.5, y + 0.5) with
 * half-open edges in y (min(y1,y2) <= yc < max(y1,y2)), the same arithmetic
 * in the same order as the server, so a preview drawn here matches the pixels
 * the server will commit. POST /rasterize is the oracle when in doubt.
 */

import type { Point } from "./types.js";

export interface FillMask {
  width: number;
  height: number;
  /** 1 where the polygon covers the pixel center. */
  mask: Uint8Array;
}

export function evenOddFill(polygon: Point[], height: number, width: number): FillMask {
  const mask = new Uint8Array(height * width);
  if (polygon.length < 3) return { width, height, mask };
  const pts = polygon.map(([x, y]) => [Number(x), Number(y)] as const);

  const ys = pts.map((p) => p[1]);
  const rowLo = Math.max(Math.floor(Math.min(...ys) - 0.5), 0);
  const rowHi = Math.min(Math.ceil(Math.max(...ys)), height - 1);
  for (let row = rowLo; row <= rowHi; row++) {
    const yc = row + 0.5;
    const crossings: number[] = [];
    for (let i = 0; i < pts.length; i++) {
      const [x1, y1] = pts[i];
      const [x2, y2] = pts[(i + 1) % pts.length];
      if (y1 === y2) continue;
      if (Math.min(y1, y2) <= yc && yc < Math.max(y1, y2)) {
        crossings.push(x1 + ((yc - y1) * (x2 - x1)) / (y2 - y1));
      }
    }
    crossings.sort((a, b) => a - b);
    for (let i = 0; i + 1 < crossings.length; i += 2) {
      const lo = Math.max(Math.ceil(crossings[i] - 0.5), 0);
      const hi = Math.min(Math.ceil(crossings[i + 1] - 0.5) - 1, width - 1);
      for (let col = lo; col <= hi; col++) {
        mask[row * width + col] = 1;
      }
    }
  }
  return { width, height, mask };
}

/** Filled pixels as (y, x) pairs in row-major order, as /rasterize reports. */
export function fillPixels(polygon: Point[], height: number, width: number): [number, number][] {
  const { mask } = evenOddFill(polygon, height, width);
  const pixels: [number, number][] = [];
  for (let row = 0; row < height; row++) {
    for (let col = 0; col < width; col++) {
      if (mask[row * width + col]) pixels.push([row, col]);
    }
  }
  return pixels;
}
