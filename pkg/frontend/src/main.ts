/**
 * Browser entry point: bind the controller to the static shell in
 * index.html.  The service mounts the built bundle under /ui, so API calls
 * go to the same origin one level up.
 */

import { ExplorerApi } from "./api.js";
import type { Metric } from "./api.js";
import { ExplorerController } from "./controller.js";

function required(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id} in index.html`);
  return node;
}

export function bootstrap(baseUrl = ""): ExplorerController {
  const controller = new ExplorerController(new ExplorerApi(baseUrl), {
    gallery: required("gallery"),
    tray: required("tray"),
    grid: required("grid"),
    history: required("history"),
    banner: required("banner"),
    validation: required("validation"),
    status: required("status"),
  });

  (required("metric") as HTMLSelectElement).addEventListener("change", (e) => {
    controller.setMetric((e.target as HTMLSelectElement).value as Metric);
  });
  (required("k") as HTMLInputElement).addEventListener("change", (e) => {
    controller.setK(Number((e.target as HTMLInputElement).value));
  });
  required("overlays").addEventListener("change", () =>
    controller.toggleOverlays());
  required("reconstructions").addEventListener("change", () =>
    controller.toggleReconstructions());
  required("run").addEventListener("click", () => void controller.runQuery());

  void controller.start();
  return controller;
}

declare global {
  interface Window {
    explorer?: ExplorerController;
  }
}

if (typeof document !== "undefined" && document.getElementById("gallery")) {
  // served under /ui/, the API lives at the origin root
  window.explorer = bootstrap("");
}
