/** DOM bootstrap: binds the controller to the canvas stack and sidebar. */

import { ApiClient } from "./api.js";
import { SlideViewController } from "./app.js";
import { colorForInstance, cssColor } from "./colors.js";
import { classOverlay, flowOverlay, labelOverlay, previewOverlay } from "./overlay.js";
import { panBy, screenToWorld, setLayer, setOpacity, zoomAt, type OverlayLayer } from "./viewport.js";
import type { CorrectionOp, Point } from "./types.js";

const POLL_MS = 3000;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function describeOp(op: CorrectionOp): string {
  switch (op.op) {
    case "add_roi":
      return `add ROI (${op.polygon.length} vertices)`;
    case "delete_instance":
      return `delete instance ${op.id}`;
    case "merge":
      return `merge ${op.b} into ${op.a}`;
    case "split":
      return `split instance ${op.id}`;
  }
}

class ReviewScreen {
  private api = new ApiClient("");
  private controller: SlideViewController;
  private base = el<HTMLCanvasElement>("base-layer");
  private top = el<HTMLCanvasElement>("overlay-layer");
  private panoramaImg: HTMLImageElement | null = null;
  private overlayCanvas: HTMLCanvasElement | null = null;
  private overlayDirty = true;
  private selectedId: number | null = null;
  private pendingVertices: Point[] = [];
  private dragging = false;
  private lastPointer: [number, number] = [0, 0];

  constructor(slideId: string) {
    this.controller = new SlideViewController(this.api, slideId);
  }

  async start(): Promise<void> {
    await this.controller.load();
    if (this.controller.error === null && this.controller.panorama) {
      const blob = new Blob([this.controller.panorama as unknown as BlobPart], { type: "image/png" });
      this.panoramaImg = new Image();
      this.panoramaImg.src = URL.createObjectURL(blob);
      await this.panoramaImg.decode();
    }
    this.bind();
    this.syncSidebar();
    this.draw();
    window.setInterval(() => void this.pollVersion(), POLL_MS);
  }

  private async pollVersion(): Promise<void> {
    await this.controller.poll();
    el("stale-banner").hidden = !this.controller.stale;
  }

  private markOverlayDirty(): void {
    this.overlayDirty = true;
  }

  // ---- event wiring

  private bind(): void {
    const stack = el("canvas-stack");
    stack.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      const rect = this.top.getBoundingClientRect();
      const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
      this.controller.viewport = zoomAt(
        this.controller.viewport,
        factor,
        ev.clientX - rect.left,
        ev.clientY - rect.top,
      );
      this.draw();
    });
    stack.addEventListener("pointerdown", (ev) => {
      if (ev.button === 1 || ev.shiftKey) {
        this.dragging = true;
        this.lastPointer = [ev.clientX, ev.clientY];
        return;
      }
      if (ev.button === 0) this.addVertex(ev);
    });
    stack.addEventListener("pointermove", (ev) => {
      if (!this.dragging) return;
      this.controller.viewport = panBy(
        this.controller.viewport,
        ev.clientX - this.lastPointer[0],
        ev.clientY - this.lastPointer[1],
      );
      this.lastPointer = [ev.clientX, ev.clientY];
      this.draw();
    });
    stack.addEventListener("pointerup", () => {
      this.dragging = false;
    });
    stack.addEventListener("dblclick", (ev) => {
      ev.preventDefault();
      this.closePolygon();
    });
    window.addEventListener("keydown", (ev) => {
      if (ev.key === "Escape") {
        this.pendingVertices = [];
        this.draw();
      } else if (ev.key === "Enter") {
        this.closePolygon();
      } else if (ev.ctrlKey && ev.key === "z") {
        this.controller.undoDraft();
        this.syncSidebar();
        this.draw();
      } else if (ev.ctrlKey && ev.key === "y") {
        this.controller.redoDraft();
        this.syncSidebar();
        this.draw();
      }
    });

    el<HTMLSelectElement>("layer-select").addEventListener("change", (ev) => {
      const layer = (ev.target as HTMLSelectElement).value as OverlayLayer;
      this.controller.viewport = setLayer(this.controller.viewport, layer);
      this.markOverlayDirty();
      this.draw();
    });
    el<HTMLInputElement>("opacity-slider").addEventListener("input", (ev) => {
      const value = Number((ev.target as HTMLInputElement).value) / 100;
      this.controller.viewport = setOpacity(this.controller.viewport, value);
      this.markOverlayDirty();
      this.draw();
    });
    el("undo-btn").addEventListener("click", () => {
      this.controller.undoDraft();
      this.syncSidebar();
      this.draw();
    });
    el("redo-btn").addEventListener("click", () => {
      this.controller.redoDraft();
      this.syncSidebar();
      this.draw();
    });
    el("submit-btn").addEventListener("click", () => void this.submit());
    el("reload-btn").addEventListener("click", () => void this.reload());
  }

  private addVertex(ev: PointerEvent): void {
    const rect = this.top.getBoundingClientRect();
    const [wx, wy] = screenToWorld(
      this.controller.viewport,
      ev.clientX - rect.left,
      ev.clientY - rect.top,
    );
    this.pendingVertices.push([wx, wy]);
    this.draw();
  }

  private closePolygon(): void {
    if (this.pendingVertices.length === 0) return;
    const check = this.controller.drawRoi(this.pendingVertices);
    if (check.ok) {
      this.pendingVertices = [];
      this.setStatus("ROI added to draft");
    } else {
      this.setStatus(check.reason); // outline stays highlighted for fixing
    }
    this.syncSidebar();
    this.draw();
  }

  private async submit(): Promise<void> {
    const outcome = await this.controller.submit();
    switch (outcome.status) {
      case "applied":
        this.setStatus(`corrections applied; label version ${outcome.newVersion}`);
        this.markOverlayDirty();
        break;
      case "rebased":
        this.setStatus(
          `server moved to version ${outcome.currentVersion}; ` +
            `${outcome.dropped.length} op(s) dropped, draft rebased`,
        );
        this.markOverlayDirty();
        break;
      case "offline":
        this.setStatus("server unreachable; draft kept locally");
        break;
      case "empty":
        this.setStatus("draft is empty");
        break;
    }
    el("stale-banner").hidden = !this.controller.stale;
    this.syncSidebar();
    this.draw();
  }

  private async reload(): Promise<void> {
    await this.controller.load();
    this.markOverlayDirty();
    el("stale-banner").hidden = true;
    this.syncSidebar();
    this.draw();
  }

  private setStatus(text: string): void {
    el("status-line").textContent = text;
  }

  // ---- sidebar

  private syncSidebar(): void {
    if (this.controller.error !== null) {
      el("error-panel").hidden = false;
      el("error-panel").textContent = this.controller.error;
      return;
    }
    el("error-panel").hidden = true;
    const record = this.controller.record;
    el("slide-title").textContent = record
      ? `${record.slide_id} — ${record.state}, labels v${record.label_version}`
      : "";

    const classes = this.controller.classByInstance();
    const names = this.controller.cells?.map((c) => [c.id, c.class_name] as const) ?? [];
    const nameById = new Map(names);
    const list = el("instance-list");
    list.replaceChildren();
    for (const id of this.controller.instances) {
      const item = document.createElement("li");
      const swatch = document.createElement("span");
      swatch.className = "swatch";
      swatch.style.backgroundColor = cssColor(colorForInstance(id));
      item.append(swatch, ` ${id}`);
      const cls = classes.get(id);
      if (cls !== undefined) item.append(` · ${nameById.get(id) ?? cls}`);
      item.addEventListener("click", () => {
        this.selectedId = this.selectedId === id ? null : id;
        this.markOverlayDirty();
        this.draw();
      });
      list.append(item);
    }

    const ops = el("pending-ops");
    ops.replaceChildren();
    this.controller.pendingOps().forEach((op, index) => {
      const item = document.createElement("li");
      item.textContent = describeOp(op);
      item.title = `pending op ${index + 1}`;
      ops.append(item);
    });
    el<HTMLButtonElement>("undo-btn").disabled = !this.controller.canUndo();
    el<HTMLButtonElement>("redo-btn").disabled = !this.controller.canRedo();
  }

  // ---- rendering

  private overlayImage(): HTMLCanvasElement | null {
    const labels = this.controller.labels;
    if (!labels) return null;
    if (!this.overlayDirty && this.overlayCanvas) return this.overlayCanvas;
    const vp = this.controller.viewport;
    let rgba: Uint8ClampedArray<ArrayBuffer>;
    switch (vp.visibleLayer) {
      case "image":
        return null;
      case "labels":
        rgba = labelOverlay(labels, vp.overlayOpacity, this.selectedId);
        break;
      case "classes":
        rgba = classOverlay(labels, this.controller.classByInstance(), vp.overlayOpacity);
        break;
      case "flows":
        rgba = flowOverlay(labels, vp.overlayOpacity);
        break;
    }
    const canvas = document.createElement("canvas");
    canvas.width = labels.width;
    canvas.height = labels.height;
    const ctx = canvas.getContext("2d")!;
    ctx.putImageData(new ImageData(rgba, labels.width, labels.height), 0, 0);
    this.overlayCanvas = canvas;
    this.overlayDirty = false;
    return canvas;
  }

  private draw(): void {
    const vp = this.controller.viewport;
    for (const canvas of [this.base, this.top]) {
      canvas.width = canvas.clientWidth;
      canvas.height = canvas.clientHeight;
    }
    const bctx = this.base.getContext("2d")!;
    bctx.imageSmoothingEnabled = false;
    bctx.setTransform(vp.zoom, 0, 0, vp.zoom, vp.panX, vp.panY);
    if (this.panoramaImg) bctx.drawImage(this.panoramaImg, 0, 0);

    const octx = this.top.getContext("2d")!;
    octx.imageSmoothingEnabled = false;
    octx.setTransform(vp.zoom, 0, 0, vp.zoom, vp.panX, vp.panY);
    const overlay = this.overlayImage();
    if (overlay) octx.drawImage(overlay, 0, 0);

    // pending ROI fills from the draft, in each op's own instance-less tint
    const labels = this.controller.labels;
    if (labels) {
      for (const op of this.controller.pendingOps()) {
        if (op.op !== "add_roi") continue;
        const fill = this.controller.previewFill(op.polygon);
        const rgba = previewOverlay(fill, [255, 255, 0], 0.45);
        const patch = document.createElement("canvas");
        patch.width = fill.width;
        patch.height = fill.height;
        patch.getContext("2d")!.putImageData(new ImageData(rgba, fill.width, fill.height), 0, 0);
        octx.drawImage(patch, 0, 0);
      }
    }

    // in-progress outline
    if (this.pendingVertices.length > 0) {
      octx.strokeStyle = "#ffcc00";
      octx.lineWidth = 1.5 / vp.zoom;
      octx.beginPath();
      const [x0, y0] = this.pendingVertices[0];
      octx.moveTo(x0, y0);
      for (const [x, y] of this.pendingVertices.slice(1)) octx.lineTo(x, y);
      octx.stroke();
    }
  }
}

const params = new URLSearchParams(window.location.search);
const slideId = params.get("slide");
if (slideId) {
  void new ReviewScreen(slideId).start();
} else {
  // no slide selected: offer the server's slide list as links
  const api = new ApiClient("");
  void api.listSlides().then((slides) => {
    const list = el("instance-list");
    list.replaceChildren();
    for (const slide of slides) {
      const item = document.createElement("li");
      const link = document.createElement("a");
      link.href = `?slide=${slide.slide_id}`;
      link.textContent = `${slide.slide_id} (${slide.state})`;
      item.append(link);
      list.append(item);
    }
    el("slide-title").textContent = "pick a slide";
  });
}
