/**
 * Explorer session state: source selections, view toggles, and an immutable
 * history of completed queries that supports exact back/forward navigation.
 */

import type { Metric, QueryRequest, QueryResponse } from "./api.js";

export type SourceSlot = "normal" | "abnormal";

export interface HistoryEntry {
  readonly request: QueryRequest;
  readonly response: QueryResponse;
}

export interface ExplorerState {
  readonly normalSourceId: string | null;
  readonly abnormalSourceId: string | null;
  readonly metric: Metric;
  readonly k: number;
  readonly showOverlays: boolean;
  readonly showReconstructions: boolean;
  /** Completed queries, oldest first.  Entries are deep-frozen. */
  readonly history: readonly HistoryEntry[];
  /** Index of the entry on display, or -1 before the first query. */
  readonly cursor: number;
}

export function initialState(): ExplorerState {
  return {
    normalSourceId: null,
    abnormalSourceId: null,
    metric: "concat",
    k: 5,
    showOverlays: true,
    showReconstructions: false,
    history: [],
    cursor: -1,
  };
}

export function currentEntry(state: ExplorerState): HistoryEntry | null {
  return state.cursor >= 0 ? (state.history[state.cursor] ?? null) : null;
}

/** Put one slice into a source slot. */
export function selectSource(
  state: ExplorerState,
  slot: SourceSlot,
  sliceId: string,
): ExplorerState {
  return slot === "normal"
    ? { ...state, normalSourceId: sliceId }
    : { ...state, abnormalSourceId: sliceId };
}

/** Gallery click: use one slice as both sources (plain single-slice query). */
export function selectSlice(state: ExplorerState, sliceId: string): ExplorerState {
  return { ...state, normalSourceId: sliceId, abnormalSourceId: sliceId };
}

export function setMetric(state: ExplorerState, metric: Metric): ExplorerState {
  return { ...state, metric };
}

export function setK(state: ExplorerState, k: number): ExplorerState {
  if (!Number.isInteger(k) || k < 1 || k > 100) {
    throw new RangeError(`k must be an integer in [1, 100], got ${k}`);
  }
  return { ...state, k };
}

export function toggleOverlays(state: ExplorerState): ExplorerState {
  return { ...state, showOverlays: !state.showOverlays };
}

export function toggleReconstructions(state: ExplorerState): ExplorerState {
  return { ...state, showReconstructions: !state.showReconstructions };
}

function deepFreeze<T>(value: T): T {
  if (value !== null && typeof value === "object" && !Object.isFrozen(value)) {
    Object.freeze(value);
    for (const key of Object.getOwnPropertyNames(value)) {
      deepFreeze((value as Record<string, unknown>)[key]);
    }
  }
  return value;
}

/**
 * Record a completed query.  Navigation history behaves like a browser's:
 * querying from a past position drops the abandoned forward entries.
 */
export function applyResult(
  state: ExplorerState,
  request: QueryRequest,
  response: QueryResponse,
): ExplorerState {
  const entry = deepFreeze<HistoryEntry>({ request, response });
  const kept = state.history.slice(0, state.cursor + 1);
  const history = Object.freeze([...kept, entry]);
  return { ...state, history, cursor: history.length - 1 };
}

export function canGoBack(state: ExplorerState): boolean {
  return state.cursor > 0;
}

export function canGoForward(state: ExplorerState): boolean {
  return state.cursor >= 0 && state.cursor < state.history.length - 1;
}

/**
 * Jump to any prior (or forward) query.  Restores the exact stored result
 * and the selections that produced it, so re-running reproduces it.
 */
export function goTo(state: ExplorerState, index: number): ExplorerState {
  const entry = state.history[index];
  if (index < 0 || entry === undefined) {
    throw new RangeError(`no history entry at ${index}`);
  }
  return {
    ...state,
    cursor: index,
    normalSourceId: entry.request.normal_source_id,
    abnormalSourceId: entry.request.abnormal_source_id,
    metric: entry.request.metric,
    k: entry.request.k,
  };
}

export function goBack(state: ExplorerState): ExplorerState {
  return canGoBack(state) ? goTo(state, state.cursor - 1) : state;
}

export function goForward(state: ExplorerState): ExplorerState {
  return canGoForward(state) ? goTo(state, state.cursor + 1) : state;
}

/**
 * Promote a result tile to the next query's source.  With `slot` given the
 * tile fills that side of the tray; otherwise it becomes both sources.
 */
export function pivotTo(
  state: ExplorerState,
  sliceId: string,
  slot?: SourceSlot,
): ExplorerState {
  return slot === undefined
    ? selectSlice(state, sliceId)
    : selectSource(state, slot, sliceId);
}
