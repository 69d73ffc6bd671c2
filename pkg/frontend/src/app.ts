/** Controller behind the review screen.
 *
 * Owns everything the DOM layer renders: the loaded slide record, decoded
 * label image, cell classifications, the draft correction, and the viewport.
 * The server stays the single source of truth; the controller never edits
 * label pixels locally, it only previews pending ops and submits patches.
 */

import { ApiClient, ApiError, ConflictError, NetworkError } from "./api.js";
import {
  canRedo,
  canUndo,
  clearOps,
  newDraft,
  pushOp,
  rebase,
  redo,
  undo,
  type DraftHistory,
} from "./draft.js";
import { validateRoi, type RoiCheck } from "./geometry.js";
import { decodeLabelMap, instanceIds, type LabelImage } from "./png.js";
import { evenOddFill, fillPixels, type FillMask } from "./raster.js";
import { createViewport, type ViewportState } from "./viewport.js";
import type { CellRecord, CorrectionOp, Point, SlideRecord } from "./types.js";

export type SubmitOutcome =
  | { status: "applied"; newVersion: number }
  | { status: "rebased"; currentVersion: number; dropped: CorrectionOp[] }
  | { status: "offline" }
  | { status: "empty" };

export class SlideViewController {
  record: SlideRecord | null = null;
  panorama: Uint8Array | null = null;
  labels: LabelImage | null = null;
  cells: CellRecord[] | null = null;
  /** Non-zero instance IDs shown in the sidebar. */
  instances: number[] = [];
  /** Label version the current view was rendered from. */
  loadedVersion: number | null = null;
  error: string | null = null;
  stale = false;
  draft: DraftHistory = newDraft(0);
  viewport: ViewportState = createViewport();
  lastRejection: string | null = null;

  constructor(private api: ApiClient, readonly slideId: string) {}

  /** Fetch panorama, current labels, and cells; reset the draft. */
  async load(): Promise<void> {
    this.error = null;
    try {
      this.record = await this.api.getSlide(this.slideId);
      this.panorama = await this.api.fetchPanorama(this.slideId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        this.error =
          this.record === null
            ? `slide ${this.slideId} not found`
            : `slide ${this.slideId} has no panorama yet`;
        return;
      }
      throw err;
    }
    await this.refreshLabels();
    this.loadedVersion = this.record.label_version;
    this.stale = false;
    this.draft = newDraft(this.record.label_version);
  }

  /** Re-fetch labels and cells for the record's current version. */
  private async refreshLabels(): Promise<void> {
    const record = this.record!;
    if (record.label_version >= 1) {
      const bytes = await this.api.fetchLabels(record.slide_id, record.label_version);
      this.labels = await decodeLabelMap(bytes);
      this.instances = instanceIds(this.labels);
    } else {
      this.labels = null;
      this.instances = [];
    }
    const doc = await this.api.fetchCells(record.slide_id);
    this.cells =
      doc !== null && doc.label_version === record.label_version ? doc.cells : null;
  }

  /** Predicted class per instance ID, for the classes layer. */
  classByInstance(): Map<number, number> {
    const out = new Map<number, number>();
    for (const cell of this.cells ?? []) {
      out.set(cell.id, cell.predicted);
    }
    return out;
  }

  /** Compare the server's label version against the loaded one. */
  async poll(): Promise<boolean> {
    try {
      const record = await this.api.getSlide(this.slideId);
      if (this.loadedVersion !== null && record.label_version !== this.loadedVersion) {
        this.stale = true;
      }
    } catch (err) {
      if (!(err instanceof NetworkError)) throw err; // offline polls are silent
    }
    return this.stale;
  }

  // ---- draft editing

  drawRoi(polygon: Point[]): RoiCheck {
    const check = validateRoi(polygon);
    if (!check.ok) {
      this.lastRejection = check.reason;
      return check;
    }
    this.lastRejection = null;
    this.draft = pushOp(this.draft, { op: "add_roi", polygon });
    return check;
  }

  deleteInstance(id: number): void {
    this.draft = pushOp(this.draft, { op: "delete_instance", id });
  }

  mergeInstances(a: number, b: number): void {
    this.draft = pushOp(this.draft, { op: "merge", a, b });
  }

  splitInstance(id: number, polyline: Point[]): void {
    this.draft = pushOp(this.draft, { op: "split", id, polyline });
  }

  pendingOps(): CorrectionOp[] {
    return this.draft.present.ops;
  }

  undoDraft(): void {
    this.draft = undo(this.draft);
  }

  redoDraft(): void {
    this.draft = redo(this.draft);
  }

  discardDraft(): void {
    this.draft = clearOps(this.draft);
  }

  canUndo(): boolean {
    return canUndo(this.draft);
  }

  canRedo(): boolean {
    return canRedo(this.draft);
  }

  /** Client-side fill for the pending-ROI preview. */
  previewFill(polygon: Point[]): FillMask {
    const labels = this.labels;
    const height = labels ? labels.height : 0;
    const width = labels ? labels.width : 0;
    return evenOddFill(polygon, height, width);
  }

  /** True when the local fill matches the server's dry-run rasterization. */
  async previewMatchesServer(polygon: Point[]): Promise<boolean> {
    const labels = this.labels;
    if (!labels) return false;
    const local = fillPixels(polygon, labels.height, labels.width);
    const server = await this.api.rasterize(polygon, labels.height, labels.width);
    if (server.count !== local.length) return false;
    return server.pixels.every(
      ([y, x], i) => y === local[i][0] && x === local[i][1],
    );
  }

  // ---- submission

  /** Send the draft; reload on success, rebase on conflict, keep it offline. */
  async submit(): Promise<SubmitOutcome> {
    const { baseVersion, ops } = this.draft.present;
    if (ops.length === 0) return { status: "empty" };
    let newVersion: number;
    try {
      const result = await this.api.submitCorrections(this.slideId, baseVersion, ops);
      newVersion = result.new_version;
    } catch (err) {
      if (err instanceof ConflictError) {
        return this.rebaseOnto(err.currentVersion);
      }
      if (err instanceof NetworkError) {
        return { status: "offline" }; // draft stays as-is for retry
      }
      throw err;
    }
    await this.load(); // new_version is now current; draft resets against it
    return { status: "applied", newVersion };
  }

  private async rebaseOnto(currentVersion: number | null): Promise<SubmitOutcome> {
    this.record = await this.api.getSlide(this.slideId);
    await this.refreshLabels();
    this.loadedVersion = this.record.label_version;
    this.stale = false;
    const result = rebase(this.draft, this.record.label_version, this.instances);
    this.draft = result.history;
    return {
      status: "rebased",
      currentVersion: currentVersion ?? this.record.label_version,
      dropped: result.dropped,
    };
  }
}
