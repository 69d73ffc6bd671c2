/** Polygon validity checks applied before an ROI enters the draft. */

import type { Point } from "./types.js";

function cross(ox: number, oy: number, ax: number, ay: number, bx: number, by: number): number {
  return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox);
}

function onSegment(px: number, py: number, qx: number, qy: number, rx: number, ry: number): boolean {
  // q collinear with p-r assumed; true when q lies within the bounding box
  return (
    Math.min(px, rx) <= qx && qx <= Math.max(px, rx) &&
    Math.min(py, ry) <= qy && qy <= Math.max(py, ry)
  );
}

function segmentsIntersect(a: Point, b: Point, c: Point, d: Point): boolean {
  const d1 = cross(c[0], c[1], d[0], d[1], a[0], a[1]);
  const d2 = cross(c[0], c[1], d[0], d[1], b[0], b[1]);
  const d3 = cross(a[0], a[1], b[0], b[1], c[0], c[1]);
  const d4 = cross(a[0], a[1], b[0], b[1], d[0], d[1]);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) &&
      ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return true;
  }
  if (d1 === 0 && onSegment(c[0], c[1], a[0], a[1], d[0], d[1])) return true;
  if (d2 === 0 && onSegment(c[0], c[1], b[0], b[1], d[0], d[1])) return true;
  if (d3 === 0 && onSegment(a[0], a[1], c[0], c[1], b[0], b[1])) return true;
  if (d4 === 0 && onSegment(a[0], a[1], d[0], d[1], b[0], b[1])) return true;
  return false;
}

/** True when the closed polygon has no self-intersections.
 *
 * Adjacent edges may touch only at their shared vertex; an edge folding back
 * over its neighbour counts as an intersection, as does any repeated vertex.
 */
export function isSimplePolygon(polygon: Point[]): boolean {
  const n = polygon.length;
  if (n < 3) return false;
  for (let i = 0; i < n; i++) {
    const [x1, y1] = polygon[i];
    const [x2, y2] = polygon[(i + 1) % n];
    if (x1 === x2 && y1 === y2) return false; // zero-length edge
  }
  for (let i = 0; i < n; i++) {
    const a = polygon[i];
    const b = polygon[(i + 1) % n];
    for (let j = i + 1; j < n; j++) {
      const c = polygon[j];
      const d = polygon[(j + 1) % n];
      const adjacent = j === i + 1 || (i === 0 && j === n - 1);
      if (adjacent) {
        // shared vertex s; the far endpoints must not fold back across it
        const s = j === i + 1 ? b : a;
        const u = j === i + 1 ? a : b;
        const v = j === i + 1 ? d : c;
        const collinear = cross(s[0], s[1], u[0], u[1], v[0], v[1]) === 0;
        const sameSide = (u[0] - s[0]) * (v[0] - s[0]) + (u[1] - s[1]) * (v[1] - s[1]) > 0;
        if (collinear && sameSide) return false;
        continue;
      }
      if (segmentsIntersect(a, b, c, d)) return false;
    }
  }
  return true;
}

export type RoiCheck = { ok: true } | { ok: false; reason: string };

/** Gate for draw_roi: at least 3 vertices and a simple outline. */
export function validateRoi(polygon: Point[]): RoiCheck {
  if (polygon.length < 3) {
    return { ok: false, reason: "an ROI needs at least 3 vertices" };
  }
  if (!isSimplePolygon(polygon)) {
    return { ok: false, reason: "polygon outline crosses itself" };
  }
  return { ok: true };
}
