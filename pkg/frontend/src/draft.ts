/** Draft correction being assembled in the browser.
 *
 * The draft mirrors the server's patch ops against a specific base label
 * version. Every mutation snapshots the whole draft, so undo/redo restore
 * prior drafts exactly, op payloads included. Nothing here touches the map:
 * committed labels only ever come back from the server.
 */

import type { CorrectionOp } from "./types.js";

export interface DraftCorrection {
  baseVersion: number;
  ops: CorrectionOp[];
}

export interface DraftHistory {
  present: DraftCorrection;
  past: DraftCorrection[];
  future: DraftCorrection[];
}

export function newDraft(baseVersion: number): DraftHistory {
  return { present: { baseVersion, ops: [] }, past: [], future: [] };
}

function commit(history: DraftHistory, next: DraftCorrection): DraftHistory {
  return {
    present: next,
    past: [...history.past, structuredClone(history.present)],
    future: [], // a fresh edit invalidates the redo branch
  };
}

export function pushOp(history: DraftHistory, op: CorrectionOp): DraftHistory {
  const next = structuredClone(history.present);
  next.ops.push(structuredClone(op));
  return commit(history, next);
}

export function removeOp(history: DraftHistory, index: number): DraftHistory {
  if (index < 0 || index >= history.present.ops.length) return history;
  const next = structuredClone(history.present);
  next.ops.splice(index, 1);
  return commit(history, next);
}

export function clearOps(history: DraftHistory): DraftHistory {
  if (history.present.ops.length === 0) return history;
  return commit(history, { baseVersion: history.present.baseVersion, ops: [] });
}

export function canUndo(history: DraftHistory): boolean {
  return history.past.length > 0;
}

export function canRedo(history: DraftHistory): boolean {
  return history.future.length > 0;
}

export function undo(history: DraftHistory): DraftHistory {
  if (!canUndo(history)) return history;
  return {
    present: history.past[history.past.length - 1],
    past: history.past.slice(0, -1),
    future: [structuredClone(history.present), ...history.future],
  };
}

export function redo(history: DraftHistory): DraftHistory {
  if (!canRedo(history)) return history;
  return {
    present: history.future[0],
    past: [...history.past, structuredClone(history.present)],
    future: history.future.slice(1),
  };
}

export interface RebaseResult {
  history: DraftHistory;
  /** Ops dropped because they referenced instances gone in the new version. */
  dropped: CorrectionOp[];
}

function compatible(op: CorrectionOp, liveIds: Set<number>): boolean {
  switch (op.op) {
    case "add_roi":
      return true;
    case "delete_instance":
    case "split":
      return liveIds.has(op.id);
    case "merge":
      return liveIds.has(op.a) && liveIds.has(op.b);
  }
}

/** Replay the draft onto a newer label version after a 409 conflict.
 *
 * Ops referencing instance IDs that no longer exist are dropped; the rest
 * carry over against the new base. History restarts because the discarded
 * snapshots pointed at the old version.
 */
export function rebase(
  history: DraftHistory,
  newBaseVersion: number,
  liveIds: Iterable<number>,
): RebaseResult {
  const live = new Set(liveIds);
  const kept: CorrectionOp[] = [];
  const dropped: CorrectionOp[] = [];
  for (const op of history.present.ops) {
    (compatible(op, live) ? kept : dropped).push(structuredClone(op));
  }
  return {
    history: { present: { baseVersion: newBaseVersion, ops: kept }, past: [], future: [] },
    dropped,
  };
}
