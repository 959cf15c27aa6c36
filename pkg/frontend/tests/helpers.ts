/** Shared fakes: canned service payloads and a route-table fetch stub. */

import type {
  FetchLike,
  QueryRequest,
  QueryResponse,
  ResultItem,
  SlicePreviews,
  SliceSummary,
} from "../src/api.js";

export function fakePreviews(id: string): SlicePreviews {
  return {
    id,
    x_hat_plus: `${id}-plus`,
    x_hat_minus: `${id}-minus`,
    y_hat: `${id}-labels`,
    abnormality_score: 4.25,
  };
}

export function fakeItem(rank: number, overrides: Partial<ResultItem> = {}): ResultItem {
  const id = overrides.slice_id ?? `PH${String(rank).padStart(4, "0")}_0`;
  return {
    rank,
    slice_id: id,
    distance: rank === 1 ? 0.0 : (rank - 1) * 0.53125,
    is_abnormal: rank % 2 === 0,
    abnormality_score: 3.0 + rank,
    meta: { shape_class: rank % 3, lesion_bucket: rank % 2 ? "small" : "none" },
    thumbnail: `${id}-thumb`,
    preview: fakePreviews(id),
    ...overrides,
  };
}

export function fakeQueryResponse(
  request: QueryRequest,
  overrides: Partial<QueryResponse> = {},
): QueryResponse {
  return {
    metric: request.metric,
    k: request.k,
    provenance: {
      normal_source_id: request.normal_source_id,
      abnormal_source_id: request.abnormal_source_id,
    },
    query_score: 7.125,
    items: Array.from({ length: request.k }, (_, i) => fakeItem(i + 1)),
    ...overrides,
  };
}

export function fakeGallery(ids: string[]): SliceSummary[] {
  return ids.map((id, i) => ({
    id,
    is_abnormal: i % 2 === 1,
    in_index: true,
    thumbnail: `${id}-thumb`,
    meta: { shape_class: i % 3 },
  }));
}

export interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

export type RouteHandler = (call: RecordedCall) =>
  | unknown
  | Promise<unknown>;

export interface RoutedResponse {
  status: number;
  body: unknown;
}

export function isRouted(v: unknown): v is RoutedResponse {
  return typeof v === "object" && v !== null && "status" in v && "body" in v;
}

/**
 * Fetch stub dispatching on "METHOD path"; handlers return a payload (200),
 * a {status, body} pair, or a promise of either for latency control.
 */
export function routedFetch(routes: Record<string, RouteHandler>): {
  fetchFn: FetchLike;
  calls: RecordedCall[];
} {
  const calls: RecordedCall[] = [];
  const fetchFn: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const call: RecordedCall = {
      url,
      method,
      body: init?.body ? JSON.parse(String(init.body)) : null,
    };
    calls.push(call);
    const handler = routes[`${method} ${url}`];
    if (!handler) {
      return new Response(JSON.stringify({ detail: `no route ${method} ${url}` }),
        { status: 404, headers: { "Content-Type": "application/json" } });
    }
    const result = await handler(call);
    const routed: RoutedResponse = isRouted(result)
      ? result
      : { status: 200, body: result };
    return new Response(JSON.stringify(routed.body), {
      status: routed.status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { fetchFn, calls };
}

/** A promise with its resolve/reject handles exposed. */
export function deferred<T>(): {
  promise: Promise<T>;
  resolve: (value: T) => void;
  reject: (reason: unknown) => void;
} {
  let resolve!: (value: T) => void;
  let reject!: (reason: unknown) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}
