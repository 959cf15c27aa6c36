/**
 * Typed client for the anatomy-cbir HTTP service.
 *
 * Every shape mirrors the service's JSON verbatim; the explorer performs no
 * numerical work of its own — distances, scores, and decoded previews all
 * come from these endpoints.
 */

export type Metric = "normal" | "abnormal" | "concat";

export const METRICS: readonly Metric[] = ["normal", "abnormal", "concat"];

export interface QueryRequest {
  metric: Metric;
  k: number;
  normal_source_id: string;
  abnormal_source_id: string;
  include_previews: boolean;
}

export interface HealthInfo {
  status: string;
  version: string;
  codebook_hash: string;
  index_size: number;
  slice_count: number;
  image_size: number;
}

export interface SliceSummary {
  id: string;
  is_abnormal: boolean;
  in_index: boolean;
  /** base64 PNG thumbnail */
  thumbnail: string;
  meta: Record<string, unknown>;
}

export interface SliceDetail {
  id: string;
  is_abnormal: boolean;
  /** base64 PNG at full resolution */
  image: string;
  /** class name -> base64 PNG binary mask */
  masks: Record<string, string>;
  meta: Record<string, unknown>;
}

export interface SlicePreviews {
  id: string;
  /** full reconstruction (base64 PNG) */
  x_hat_plus: string;
  /** pseudo-normal reconstruction (base64 PNG) */
  x_hat_minus: string;
  /** predicted-label color overlay (base64 PNG) */
  y_hat: string;
  abnormality_score: number;
}

export interface ResultItem {
  rank: number;
  slice_id: string;
  distance: number;
  is_abnormal: boolean;
  abnormality_score: number;
  meta: Record<string, unknown>;
  preview?: SlicePreviews;
  thumbnail?: string;
}

export interface QueryProvenance {
  normal_source_id: string;
  abnormal_source_id: string;
}

export interface QueryResponse {
  metric: Metric;
  k: number;
  provenance: QueryProvenance;
  query_score: number;
  items: ResultItem[];
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ExplorerApi {
  private readonly fetchFn: FetchLike;

  constructor(private readonly baseUrl = "", fetchFn?: FetchLike) {
    this.fetchFn = fetchFn ?? ((input, init) => globalThis.fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let message = `${response.status} ${response.statusText}`;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") message = body.detail;
      } catch {
        // non-JSON error body; keep the status line
      }
      throw new ApiError(response.status, message);
    }
    return (await response.json()) as T;
  }

  health(): Promise<HealthInfo> {
    return this.request<HealthInfo>("/health");
  }

  async listSlices(): Promise<SliceSummary[]> {
    const body = await this.request<{ slices: SliceSummary[] }>("/slices");
    return body.slices;
  }

  sliceDetail(sliceId: string): Promise<SliceDetail> {
    return this.request<SliceDetail>(`/slices/${encodeURIComponent(sliceId)}`);
  }

  slicePreviews(sliceId: string): Promise<SlicePreviews> {
    return this.request<SlicePreviews>(
      `/slices/${encodeURIComponent(sliceId)}/previews`,
    );
  }

  query(request: QueryRequest): Promise<QueryResponse> {
    return this.request<QueryResponse>("/query", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
  }
}

/** Render a base64 PNG payload as an <img> src. */
export function pngSrc(b64: string): string {
  return `data:image/png;base64,${b64}`;
}
