/** Shared types mirroring the pipeline-service REST bodies. */

export interface SlideRecord {
  slide_id: string;
  state: string;
  label_version: number;
  frames: string[];
  warnings: string[];
  artifacts: Record<string, string>;
  num_instances: number | null;
  canvas_origin: [number, number] | null;
  created_at: number;
  updated_at: number;
}

export interface CellRecord {
  id: number;
  bbox: [number, number, number, number];
  contour: [number, number][];
  probs: number[];
  predicted: number;
  class_name: string;
}

export interface CellsDocument {
  slide_id: string;
  label_version: number;
  variant: string;
  cells: CellRecord[];
}

export type Point = [number, number]; // (x, y) pixel coordinates

export type CorrectionOp =
  | { op: "add_roi"; polygon: Point[] }
  | { op: "delete_instance"; id: number }
  | { op: "merge"; a: number; b: number }
  | { op: "split"; id: number; polyline: Point[] };

export interface CorrectionResult {
  new_version: number;
  diff_summary: Record<string, number>;
}

export interface RasterizeResult {
  pixels: [number, number][]; // (y, x) row-major
  count: number;
}

export const CLASS_NAMES = [
  "superficial-intermediate",
  "parabasal",
  "koilocytotic",
  "dyskeratotic",
  "metaplastic",
] as const;
