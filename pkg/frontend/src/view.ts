/**
 * Pure view-models for the result grid.
 *
 * The grid shows the query tile followed by the k ranked results.  Distances
 * and scores are carried through verbatim — the label is just the decimal
 * rendering of the number the service sent.
 */

import type { ResultItem, SlicePreviews } from "./api.js";
import type { HistoryEntry } from "./state.js";

export interface GridOptions {
  showOverlays: boolean;
  showReconstructions: boolean;
}

export interface QueryTile {
  kind: "query";
  sliceId: string;
  /** Second source id when the query mixes two slices, else null. */
  mixedWith: string | null;
  metric: string;
  queryScore: number;
  queryScoreLabel: string;
  preview: SlicePreviews | null;
  overlay: string | null;
}

export interface ResultTile {
  kind: "result";
  sliceId: string;
  rank: number;
  distance: number;
  distanceLabel: string;
  isAbnormal: boolean;
  abnormalityScore: number;
  abnormalityScoreLabel: string;
  thumbnail: string | null;
  /** (full, pseudo-normal) reconstruction pair when enabled. */
  reconstructions: { plus: string; minus: string } | null;
  overlay: string | null;
  meta: Record<string, unknown>;
}

export type Tile = QueryTile | ResultTile;

export function formatScore(value: number): string {
  return String(value);
}

function resultTile(item: ResultItem, options: GridOptions): ResultTile {
  const preview = item.preview ?? null;
  return {
    kind: "result",
    sliceId: item.slice_id,
    rank: item.rank,
    distance: item.distance,
    distanceLabel: formatScore(item.distance),
    isAbnormal: item.is_abnormal,
    abnormalityScore: item.abnormality_score,
    abnormalityScoreLabel: formatScore(item.abnormality_score),
    thumbnail: item.thumbnail ?? null,
    reconstructions:
      options.showReconstructions && preview
        ? { plus: preview.x_hat_plus, minus: preview.x_hat_minus }
        : null,
    overlay: options.showOverlays && preview ? preview.y_hat : null,
    meta: item.meta,
  };
}

/**
 * Build the query tile + k result tiles for one completed query.
 * `queryPreview` is the decoded preview of the normal source, when loaded.
 */
export function buildGrid(
  entry: HistoryEntry,
  options: GridOptions,
  queryPreview: SlicePreviews | null = null,
): Tile[] {
  const { provenance } = entry.response;
  const mixed =
    provenance.normal_source_id !== provenance.abnormal_source_id
      ? provenance.abnormal_source_id
      : null;
  const queryTile: QueryTile = {
    kind: "query",
    sliceId: provenance.normal_source_id,
    mixedWith: mixed,
    metric: entry.response.metric,
    queryScore: entry.response.query_score,
    queryScoreLabel: formatScore(entry.response.query_score),
    preview: queryPreview,
    overlay: options.showOverlays && queryPreview ? queryPreview.y_hat : null,
  };
  return [
    queryTile,
    ...entry.response.items.map((item) => resultTile(item, options)),
  ];
}
