/** Pan/zoom/layer state for the slide canvas. All transforms are pure. */

export const ZOOM_MIN = 0.1;
export const ZOOM_MAX = 32;

export type OverlayLayer = "image" | "labels" | "flows" | "classes";

export interface ViewportState {
  panX: number;
  panY: number;
  zoom: number;
  overlayOpacity: number; // 0..1
  visibleLayer: OverlayLayer;
}

export function createViewport(): ViewportState {
  return { panX: 0, panY: 0, zoom: 1, overlayOpacity: 0.5, visibleLayer: "labels" };
}

export function clampZoom(zoom: number): number {
  return Math.min(Math.max(zoom, ZOOM_MIN), ZOOM_MAX);
}

export function panBy(vp: ViewportState, dx: number, dy: number): ViewportState {
  return { ...vp, panX: vp.panX + dx, panY: vp.panY + dy };
}

/** Scale by `factor` keeping the world point under (anchorX, anchorY) fixed. */
export function zoomAt(
  vp: ViewportState,
  factor: number,
  anchorX: number,
  anchorY: number,
): ViewportState {
  const zoom = clampZoom(vp.zoom * factor);
  const worldX = (anchorX - vp.panX) / vp.zoom;
  const worldY = (anchorY - vp.panY) / vp.zoom;
  return { ...vp, zoom, panX: anchorX - worldX * zoom, panY: anchorY - worldY * zoom };
}

export function setOpacity(vp: ViewportState, opacity: number): ViewportState {
  return { ...vp, overlayOpacity: Math.min(Math.max(opacity, 0), 1) };
}

export function setLayer(vp: ViewportState, layer: OverlayLayer): ViewportState {
  return { ...vp, visibleLayer: layer };
}

export function screenToWorld(vp: ViewportState, sx: number, sy: number): [number, number] {
  return [(sx - vp.panX) / vp.zoom, (sy - vp.panY) / vp.zoom];
}

export function worldToScreen(vp: ViewportState, wx: number, wy: number): [number, number] {
  return [wx * vp.zoom + vp.panX, wy * vp.zoom + vp.panY];
}
