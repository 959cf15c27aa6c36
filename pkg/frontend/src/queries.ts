/**
 * Turn the current selections into a service QueryRequest.
 *
 * Three modes, matching the retrieval metrics:
 *  - metric "normal":   one source slice, searched by its normal-anatomy code
 *  - metric "abnormal": one source slice, searched by its abnormal code
 *  - metric "concat":   a normal source and an abnormal source (equal for a
 *    plain whole-code query, different for a mixed query)
 */

import type { QueryRequest } from "./api.js";
import type { ExplorerState } from "./state.js";

export type ComposeOutcome =
  | { ok: true; request: QueryRequest }
  | { ok: false; message: string };

export function composeQuery(
  state: ExplorerState,
  includePreviews = true,
): ComposeOutcome {
  const { metric, k, normalSourceId, abnormalSourceId } = state;

  if (normalSourceId === null && abnormalSourceId === null) {
    return { ok: false, message: "Pick a query slice from the gallery first." };
  }

  let normal: string;
  let abnormal: string;
  if (metric === "normal") {
    normal = abnormal = (normalSourceId ?? abnormalSourceId)!;
  } else if (metric === "abnormal") {
    normal = abnormal = (abnormalSourceId ?? normalSourceId)!;
  } else {
    normal = (normalSourceId ?? abnormalSourceId)!;
    abnormal = (abnormalSourceId ?? normalSourceId)!;
  }

  return {
    ok: true,
    request: {
      metric,
      k,
      normal_source_id: normal,
      abnormal_source_id: abnormal,
      include_previews: includePreviews,
    },
  };
}

/** True when the tray holds two different slices (a mixed-code query). */
export function isMixedSelection(state: ExplorerState): boolean {
  return (
    state.normalSourceId !== null &&
    state.abnormalSourceId !== null &&
    state.normalSourceId !== state.abnormalSourceId
  );
}
