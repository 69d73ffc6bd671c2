/** RGBA overlay buffers composited above the panorama.
 *
 * Each builder maps a decoded label image to a width*height*4 byte buffer
 * ready for putImageData. Background (ID 0) stays fully transparent; labeled
 * pixels carry the requested opacity.
 */

import { colorForClass, colorForInstance } from "./colors.js";
import type { LabelImage } from "./png.js";
import type { FillMask } from "./raster.js";
import type { Rgb } from "./colors.js";

function alphaByte(opacity: number): number {
  return Math.round(Math.min(Math.max(opacity, 0), 1) * 255);
}

/** Instance overlay: every instance in its own stable color. */
export function labelOverlay(
  labels: LabelImage,
  opacity: number,
  selectedId: number | null = null,
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(labels.width * labels.height * 4);
  const alpha = alphaByte(opacity);
  const cache = new Map<number, Rgb>();
  for (let i = 0; i < labels.ids.length; i++) {
    const id = labels.ids[i];
    if (id === 0) continue;
    let color = cache.get(id);
    if (!color) {
      color = colorForInstance(id);
      cache.set(id, color);
    }
    const at = i * 4;
    out[at] = color[0];
    out[at + 1] = color[1];
    out[at + 2] = color[2];
    out[at + 3] = id === selectedId ? 255 : alpha;
  }
  return out;
}

/** Class overlay: instances tinted by their predicted class. */
export function classOverlay(
  labels: LabelImage,
  classByInstance: Map<number, number>,
  opacity: number,
): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(labels.width * labels.height * 4);
  const alpha = alphaByte(opacity);
  for (let i = 0; i < labels.ids.length; i++) {
    const id = labels.ids[i];
    if (id === 0) continue;
    const cls = classByInstance.get(id);
    const color: Rgb = cls === undefined ? [128, 128, 128] : colorForClass(cls);
    const at = i * 4;
    out[at] = color[0];
    out[at + 1] = color[1];
    out[at + 2] = color[2];
    out[at + 3] = alpha;
  }
  return out;
}

/** Flow overlay: pixels hue-coded by their direction toward the instance
 * centroid, the standard color-wheel rendering of a center-seeking field. */
export function flowOverlay(labels: LabelImage, opacity: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(labels.width * labels.height * 4);
  const alpha = alphaByte(opacity);

  const sumY = new Map<number, number>();
  const sumX = new Map<number, number>();
  const count = new Map<number, number>();
  for (let i = 0; i < labels.ids.length; i++) {
    const id = labels.ids[i];
    if (id === 0) continue;
    sumY.set(id, (sumY.get(id) ?? 0) + Math.floor(i / labels.width));
    sumX.set(id, (sumX.get(id) ?? 0) + (i % labels.width));
    count.set(id, (count.get(id) ?? 0) + 1);
  }

  for (let i = 0; i < labels.ids.length; i++) {
    const id = labels.ids[i];
    if (id === 0) continue;
    const n = count.get(id)!;
    const cy = sumY.get(id)! / n;
    const cx = sumX.get(id)! / n;
    const dy = cy - Math.floor(i / labels.width);
    const dx = cx - (i % labels.width);
    const angle = Math.atan2(dy, dx); // -pi..pi
    const hue = ((angle + Math.PI) / (2 * Math.PI)) * 360;
    const [r, g, b] = hueWheel(hue);
    const at = i * 4;
    out[at] = r;
    out[at + 1] = g;
    out[at + 2] = b;
    out[at + 3] = alpha;
  }
  return out;
}

function hueWheel(hue: number): Rgb {
  const h = ((hue % 360) + 360) % 360;
  const x = 1 - Math.abs(((h / 60) % 2) - 1);
  const scale = (v: number) => Math.round(v * 255);
  if (h < 60) return [scale(1), scale(x), 0];
  if (h < 120) return [scale(x), scale(1), 0];
  if (h < 180) return [0, scale(1), scale(x)];
  if (h < 240) return [0, scale(x), scale(1)];
  if (h < 300) return [scale(x), 0, scale(1)];
  return [scale(1), 0, scale(x)];
}

/** Pending-ROI preview: the client-side fill tinted in a single color. */
export function previewOverlay(fill: FillMask, color: Rgb, opacity: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(fill.width * fill.height * 4);
  const alpha = alphaByte(opacity);
  for (let i = 0; i < fill.mask.length; i++) {
    if (!fill.mask[i]) continue;
    const at = i * 4;
    out[at] = color[0];
    out[at + 1] = color[1];
    out[at + 2] = color[2];
    out[at + 3] = alpha;
  }
  return out;
}
