/**
 * Wires state, query composition, the API client, and the DOM together.
 *
 * Concurrency: each query issue bumps a sequence number; a response only
 * updates the view if its number is still the latest, so overlapping
 * requests are cancelled-by-supersession.  A failed query shows a retry
 * banner and leaves the current grid and selections untouched.
 */

import { ExplorerApi } from "./api.js";
import type { SlicePreviews, SliceSummary } from "./api.js";
import { composeQuery } from "./queries.js";
import {
  applyResult,
  currentEntry,
  goTo,
  initialState,
  pivotTo,
  selectSlice,
  selectSource,
  setK,
  setMetric,
  toggleOverlays,
  toggleReconstructions,
} from "./state.js";
import type { ExplorerState, SourceSlot } from "./state.js";
import { buildGrid } from "./view.js";
import {
  renderBanner,
  renderGallery,
  renderGrid,
  renderHistory,
  renderTray,
} from "./render.js";

export interface ExplorerElements {
  gallery: HTMLElement;
  tray: HTMLElement;
  grid: HTMLElement;
  history: HTMLElement;
  banner: HTMLElement;
  validation: HTMLElement;
  status: HTMLElement;
}

export class ExplorerController {
  state: ExplorerState = initialState();

  private slices: SliceSummary[] = [];
  private previews = new Map<string, SlicePreviews>();
  private querySeq = 0;

  constructor(
    private readonly api: ExplorerApi,
    private readonly els: ExplorerElements,
  ) {}

  /** Load the gallery and the service health line. */
  async start(): Promise<void> {
    try {
      const [health, slices] = await Promise.all([
        this.api.health(),
        this.api.listSlices(),
      ]);
      this.slices = slices;
      this.els.status.textContent =
        `${health.slice_count} slices · index ${health.index_size} · ` +
        `codebook ${health.codebook_hash}`;
      renderBanner(this.els.banner, null);
    } catch (error) {
      renderBanner(this.els.banner, describe(error), () => void this.start());
    }
    this.redraw();
  }

  select(sliceId: string): void {
    this.state = selectSlice(this.state, sliceId);
    this.redraw();
  }

  selectSlot(sliceId: string, slot: SourceSlot): void {
    this.state = selectSource(this.state, slot, sliceId);
    this.redraw();
  }

  setMetric(metric: ExplorerState["metric"]): void {
    this.state = setMetric(this.state, metric);
    this.redraw();
  }

  setK(k: number): void {
    this.state = setK(this.state, k);
    this.redraw();
  }

  toggleOverlays(): void {
    this.state = toggleOverlays(this.state);
    this.redraw();
  }

  toggleReconstructions(): void {
    this.state = toggleReconstructions(this.state);
    this.redraw();
  }

  /** Promote a result slice to the next query's source(s) and run it. */
  async pivot(sliceId: string, slot?: SourceSlot): Promise<void> {
    this.state = pivotTo(this.state, sliceId, slot);
    await this.runQuery();
  }

  jumpTo(index: number): void {
    this.state = goTo(this.state, index);
    this.redraw();
  }

  async runQuery(): Promise<void> {
    const composed = composeQuery(this.state);
    if (!composed.ok) {
      this.els.validation.textContent = composed.message;
      return;
    }
    this.els.validation.textContent = "";

    const token = ++this.querySeq;
    try {
      const [response, preview] = await Promise.all([
        this.api.query(composed.request),
        this.queryPreview(composed.request.normal_source_id),
      ]);
      if (token !== this.querySeq) return; // superseded by a newer query
      if (preview) this.previews.set(composed.request.normal_source_id, preview);
      this.state = applyResult(this.state, composed.request, response);
      renderBanner(this.els.banner, null);
      this.redraw();
    } catch (error) {
      if (token !== this.querySeq) return;
      renderBanner(this.els.banner, describe(error), () => void this.runQuery());
    }
  }

  private async queryPreview(sliceId: string): Promise<SlicePreviews | null> {
    const cached = this.previews.get(sliceId);
    if (cached) return cached;
    try {
      return await this.api.slicePreviews(sliceId);
    } catch {
      return null; // the grid renders without the query preview
    }
  }

  redraw(): void {
    renderGallery(this.els.gallery, this.slices, this.state, {
      onSelect: (id) => this.select(id),
      onSelectSlot: (id, slot) => this.selectSlot(id, slot),
    });
    renderTray(this.els.tray, this.state);
    renderHistory(this.els.history, this.state.history, this.state.cursor,
      (index) => this.jumpTo(index));

    const entry = currentEntry(this.state);
    if (entry) {
      const tiles = buildGrid(
        entry,
        {
          showOverlays: this.state.showOverlays,
          showReconstructions: this.state.showReconstructions,
        },
        this.previews.get(entry.request.normal_source_id) ?? null,
      );
      renderGrid(this.els.grid, tiles, {
        onPivot: (id) => void this.pivot(id),
        onPivotSlot: (id, slot) => void this.pivot(id, slot),
      });
    } else {
      this.els.grid.replaceChildren();
    }
  }
}

function describe(error: unknown): string {
  if (error instanceof Error) return `Service error: ${error.message}`;
  return "Service unreachable.";
}
