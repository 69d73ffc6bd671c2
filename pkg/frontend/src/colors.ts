/** Deterministic overlay colors.
 *
 * Instance colors are a pure function of the instance ID (golden-angle hue
 * walk), so the same cell keeps its color across reloads, versions, and
 * browsers. Class colors are a fixed five-entry palette.
 */

export type Rgb = [number, number, number];

function hslToRgb(h: number, s: number, l: number): Rgb {
  const c = (1 - Math.abs(2 * l - 1)) * s;
  const hp = h / 60;
  const x = c * (1 - Math.abs((hp % 2) - 1));
  let r = 0;
  let g = 0;
  let b = 0;
  if (hp < 1) [r, g, b] = [c, x, 0];
  else if (hp < 2) [r, g, b] = [x, c, 0];
  else if (hp < 3) [r, g, b] = [0, c, x];
  else if (hp < 4) [r, g, b] = [0, x, c];
  else if (hp < 5) [r, g, b] = [x, 0, c];
  else [r, g, b] = [c, 0, x];
  const m = l - c / 2;
  return [Math.round((r + m) * 255), Math.round((g + m) * 255), Math.round((b + m) * 255)];
}

const GOLDEN_ANGLE = 137.50776405003785;

/** Color for a non-zero instance ID; ID 0 (background) is never drawn. */
export function colorForInstance(id: number): Rgb {
  const hue = ((id * GOLDEN_ANGLE) % 360 + 360) % 360;
  const light = id % 2 === 0 ? 0.6 : 0.45; // alternate tiers split near hues
  return hslToRgb(hue, 0.65, light);
}

export function cssColor([r, g, b]: Rgb): string {
  return `rgb(${r}, ${g}, ${b})`;
}

/** One color per cytology class index, in classifier output order. */
export const CLASS_COLORS: Rgb[] = [
  [64, 160, 64],   // superficial-intermediate
  [64, 112, 208],  // parabasal
  [224, 128, 32],  // koilocytotic
  [208, 48, 48],   // dyskeratotic
  [160, 96, 192],  // metaplastic
];

export function colorForClass(classIndex: number): Rgb {
  const color = CLASS_COLORS[classIndex];
  return color ?? [128, 128, 128];
}
