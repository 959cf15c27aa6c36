/**
 * DOM construction for the explorer.  Every function rebuilds its container
 * from scratch; all interactivity is delegated through the handler bundles
 * so the controller owns the state transitions.
 */

import { pngSrc } from "./api.js";
import type { SliceSummary } from "./api.js";
import type { ExplorerState, HistoryEntry, SourceSlot } from "./state.js";
import type { ResultTile, Tile } from "./view.js";

export interface GalleryHandlers {
  onSelect(sliceId: string): void;
  onSelectSlot(sliceId: string, slot: SourceSlot): void;
}

export interface GridHandlers {
  onPivot(sliceId: string): void;
  onPivotSlot(sliceId: string, slot: SourceSlot): void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function slotButtons(
  doc: Document,
  sliceId: string,
  onSlot: (sliceId: string, slot: SourceSlot) => void,
): HTMLElement {
  const row = el(doc, "div", "slot-buttons");
  for (const slot of ["normal", "abnormal"] as const) {
    const button = el(doc, "button", `slot-button slot-${slot}`, `as ${slot}`);
    button.type = "button";
    button.dataset.slot = slot;
    button.addEventListener("click", (event) => {
      event.stopPropagation();
      onSlot(sliceId, slot);
    });
    row.appendChild(button);
  }
  return row;
}

export function renderGallery(
  container: HTMLElement,
  slices: SliceSummary[],
  state: ExplorerState,
  handlers: GalleryHandlers,
): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  for (const slice of slices) {
    const card = el(doc, "div", "gallery-card");
    card.dataset.sliceId = slice.id;
    if (slice.id === state.normalSourceId) card.classList.add("selected-normal");
    if (slice.id === state.abnormalSourceId) card.classList.add("selected-abnormal");

    const img = el(doc, "img", "gallery-thumb");
    img.src = pngSrc(slice.thumbnail);
    img.alt = slice.id;
    card.appendChild(img);

    const label = el(doc, "div", "gallery-label", slice.id);
    if (slice.is_abnormal) {
      label.appendChild(el(doc, "span", "badge badge-abnormal", "abn"));
    }
    card.appendChild(label);
    card.appendChild(slotButtons(doc, slice.id, handlers.onSelectSlot));
    card.addEventListener("click", () => handlers.onSelect(slice.id));
    container.appendChild(card);
  }
}

function tileImages(doc: Document, tile: ResultTile): HTMLElement {
  const stack = el(doc, "div", "tile-images");
  if (tile.thumbnail) {
    const img = el(doc, "img", "tile-image");
    img.src = pngSrc(tile.thumbnail);
    img.alt = tile.sliceId;
    stack.appendChild(img);
  }
  if (tile.overlay) {
    const overlay = el(doc, "img", "tile-overlay");
    overlay.src = pngSrc(tile.overlay);
    overlay.alt = `${tile.sliceId} labels`;
    stack.appendChild(overlay);
  }
  if (tile.reconstructions) {
    const pair = el(doc, "div", "tile-reconstructions");
    const plus = el(doc, "img", "tile-recon-plus");
    plus.src = pngSrc(tile.reconstructions.plus);
    plus.title = "full reconstruction";
    const minus = el(doc, "img", "tile-recon-minus");
    minus.src = pngSrc(tile.reconstructions.minus);
    minus.title = "pseudo-normal";
    pair.append(plus, minus);
    stack.appendChild(pair);
  }
  return stack;
}

export function renderGrid(
  container: HTMLElement,
  tiles: Tile[],
  handlers: GridHandlers,
): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  for (const tile of tiles) {
    const card = el(doc, "div", `tile tile-${tile.kind}`);
    card.dataset.sliceId = tile.sliceId;

    if (tile.kind === "query") {
      const title = tile.mixedWith
        ? `query ${tile.sliceId} + ${tile.mixedWith}`
        : `query ${tile.sliceId}`;
      card.appendChild(el(doc, "div", "tile-title", title));
      card.appendChild(el(doc, "div", "tile-metric", `metric: ${tile.metric}`));
      card.appendChild(
        el(doc, "div", "badge badge-score",
          `score ${tile.queryScoreLabel}`),
      );
      if (tile.preview) {
        const img = el(doc, "img", "tile-image");
        img.src = pngSrc(tile.preview.x_hat_plus);
        img.alt = tile.sliceId;
        card.appendChild(img);
      }
      if (tile.overlay) {
        const overlay = el(doc, "img", "tile-overlay");
        overlay.src = pngSrc(tile.overlay);
        overlay.alt = `${tile.sliceId} labels`;
        card.appendChild(overlay);
      }
    } else {
      card.appendChild(
        el(doc, "div", "tile-title", `#${tile.rank} ${tile.sliceId}`),
      );
      card.appendChild(
        el(doc, "div", "tile-distance", `d = ${tile.distanceLabel}`),
      );
      const badges = el(doc, "div", "tile-badges");
      badges.appendChild(
        el(doc, "span",
          `badge ${tile.isAbnormal ? "badge-abnormal" : "badge-normal"}`,
          tile.isAbnormal ? "abnormal" : "normal"),
      );
      badges.appendChild(
        el(doc, "span", "badge badge-score",
          `score ${tile.abnormalityScoreLabel}`),
      );
      card.appendChild(badges);
      card.appendChild(tileImages(doc, tile));
      card.appendChild(slotButtons(doc, tile.sliceId, handlers.onPivotSlot));
      card.addEventListener("click", () => handlers.onPivot(tile.sliceId));
    }
    container.appendChild(card);
  }
}

export function renderHistory(
  container: HTMLElement,
  history: readonly HistoryEntry[],
  cursor: number,
  onJump: (index: number) => void,
): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  history.forEach((entry, index) => {
    const { provenance } = entry.response;
    const label = provenance.normal_source_id === provenance.abnormal_source_id
      ? provenance.normal_source_id
      : `${provenance.normal_source_id}+${provenance.abnormal_source_id}`;
    const button = el(
      doc, "button", "history-entry",
      `${index + 1}. ${label} (${entry.response.metric})`,
    );
    button.type = "button";
    if (index === cursor) button.classList.add("active");
    button.addEventListener("click", () => onJump(index));
    container.appendChild(button);
  });
}

export function renderBanner(
  container: HTMLElement,
  message: string | null,
  onRetry: (() => void) | null = null,
): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  container.classList.toggle("hidden", message === null);
  if (message === null) return;
  container.appendChild(el(doc, "span", "banner-message", message));
  if (onRetry) {
    const retry = el(doc, "button", "banner-retry", "retry");
    retry.type = "button";
    retry.addEventListener("click", onRetry);
    container.appendChild(retry);
  }
}

export function renderTray(
  container: HTMLElement,
  state: ExplorerState,
): void {
  const doc = container.ownerDocument;
  container.replaceChildren();
  const slots: Array<[SourceSlot, string | null]> = [
    ["normal", state.normalSourceId],
    ["abnormal", state.abnormalSourceId],
  ];
  for (const [slot, value] of slots) {
    const box = el(doc, "div", `tray-slot tray-${slot}`);
    box.appendChild(el(doc, "span", "tray-label", `${slot} source`));
    box.appendChild(
      el(doc, "span", value ? "tray-value" : "tray-value empty",
        value ?? "none"),
    );
    container.appendChild(box);
  }
}
