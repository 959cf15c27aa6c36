"""Read-only HTTP API over a trained checkpoint, a retrieval index, and a
slice archive.

Endpoints: slice gallery with thumbnails, per-slice images/masks, decoded
previews (full reconstruction, pseudo-normal, predicted labels), retrieval
queries (including mixed normal/abnormal sources), and a health probe
reporting the codebook hash.  All state is immutable after startup except the
preview/code caches, which are guarded by a lock.
"""

from __future__ import annotations

import base64
import io
import threading
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from pydantic import BaseModel, Field

from anatomy_cbir import __version__
from anatomy_cbir.checkpoint import load_checkpoint, restore_model
from anatomy_cbir.networks import AnatomyCodec
from anatomy_cbir.quantizer import quantize
from anatomy_cbir.retrieval import (
    METRICS,
    RetrievalIndex,
    encode_pair,
    load_index,
    mix_codes,
    query_topk,
)
from anatomy_cbir.slices import CLASS_NAMES, ImageSlice, load_slices
from anatomy_cbir.trainer import slice_to_tensors

THUMBNAIL_SIZE = 64
LABEL_COLORS = ((230, 60, 60), (70, 110, 230), (70, 210, 110))  # ET, TC, ED


class QueryRequest(BaseModel):
    metric: Literal["normal", "abnormal", "concat"] = "concat"
    k: int = Field(default=5, ge=1, le=100)
    normal_source_id: str
    abnormal_source_id: str
    include_previews: bool = False


def array_to_png_b64(arr: np.ndarray, size: int | None = None) -> str:
    """Grayscale [0,1] array (or HxWx3 uint8-ish RGB) to base64 PNG."""
    a = np.asarray(arr)
    if a.ndim == 2:
        img = Image.fromarray(np.clip(a * 255.0, 0, 255).astype(np.uint8), mode="L")
    else:
        img = Image.fromarray(np.clip(a, 0, 255).astype(np.uint8), mode="RGB")
    if size is not None:
        img = img.resize((size, size), Image.BILINEAR)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def label_overlay_png_b64(label_map: np.ndarray) -> str:
    """Color-coded class map (background black)."""
    rgb = np.zeros((*label_map.shape, 3), dtype=np.uint8)
    for k, color in enumerate(LABEL_COLORS):
        rgb[label_map == k] = color
    return array_to_png_b64(rgb)


def masks_png_b64(masks: np.ndarray) -> dict:
    return {name: array_to_png_b64(masks[i].astype(np.float32))
            for i, name in enumerate(CLASS_NAMES)}


class _Cache:
    """Insert-if-absent cache safe for concurrent readers."""

    def __init__(self):
        self._data = {}
        self._lock = threading.Lock()

    def get_or_compute(self, key, fn):
        with self._lock:
            if key in self._data:
                return self._data[key]
        value = fn()
        with self._lock:
            return self._data.setdefault(key, value)


def decode_previews(model: AnatomyCodec, slc: ImageSlice) -> dict:
    """Deterministic decoded views of one slice."""
    x, _, _ = slice_to_tensors(slc, model.image_size)
    with torch.no_grad():
        enc = model.encode(x[None])
        q_minus = quantize(enc.z_e_minus, model.book_normal)
        q_plus = quantize(enc.z_e_plus, model.book_abnormal)
        logits = model.seg_decoder(q_plus.z_q)
        x_hat_plus = model.image_decoder(q_minus.z_q, logits[:, : model.num_classes])
        x_hat_minus = model.image_decoder(q_minus.z_q, None)
    label_map = logits[0].argmax(dim=0).numpy()
    return {
        "x_hat_plus": array_to_png_b64(x_hat_plus[0, 0].numpy()),
        "x_hat_minus": array_to_png_b64(x_hat_minus[0, 0].numpy()),
        "y_hat": label_overlay_png_b64(label_map),
        "abnormality_score": float(q_plus.commitment_sq[0]),
    }


def create_app(model: AnatomyCodec, index: RetrievalIndex,
               slices: dict[str, ImageSlice], ui_dir=None) -> FastAPI:
    app = FastAPI(title="anatomy-cbir service", version=__version__)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    model.eval()
    previews = _Cache()
    code_pairs = _Cache()
    thumbnails = _Cache()

    def get_slice(slice_id: str) -> ImageSlice:
        slc = slices.get(slice_id)
        if slc is None:
            raise HTTPException(status_code=404, detail=f"unknown slice id {slice_id!r}")
        return slc

    def get_pair(slice_id: str):
        slc = get_slice(slice_id)
        def compute():
            x, _, _ = slice_to_tensors(slc, model.image_size)
            return encode_pair(model, x, slice_id, meta=slc.meta)
        return code_pairs.get_or_compute(slice_id, compute)

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "version": __version__,
            "codebook_hash": index.codebook_hash,
            "index_size": len(index),
            "slice_count": len(slices),
            "image_size": model.image_size,
        }

    @app.get("/slices")
    def list_slices():
        out = []
        for slice_id in sorted(slices):
            slc = slices[slice_id]
            thumb = thumbnails.get_or_compute(
                slice_id, lambda s=slc: array_to_png_b64(s.pixels, THUMBNAIL_SIZE))
            out.append({
                "id": slice_id,
                "is_abnormal": slc.is_abnormal,
                "in_index": slice_id in index,
                "thumbnail": thumb,
                "meta": slc.meta,
            })
        return {"slices": out}

    @app.get("/slices/{slice_id}")
    def get_slice_detail(slice_id: str):
        slc = get_slice(slice_id)
        return {
            "id": slc.id,
            "is_abnormal": slc.is_abnormal,
            "image": array_to_png_b64(slc.pixels),
            "masks": masks_png_b64(slc.abnormal_masks),
            "meta": slc.meta,
        }

    @app.get("/slices/{slice_id}/previews")
    def get_previews(slice_id: str):
        slc = get_slice(slice_id)
        data = previews.get_or_compute(slice_id, lambda: decode_previews(model, slc))
        return {"id": slice_id, **data}

    @app.post("/query")
    def run_query(req: QueryRequest):
        pair_n = get_pair(req.normal_source_id)
        if req.abnormal_source_id == req.normal_source_id:
            q = pair_n
        else:
            q = mix_codes(pair_n, get_pair(req.abnormal_source_id))
        result = query_topk(index, q, req.metric, req.k)
        items = []
        for rank, item in enumerate(result.items, start=1):
            entry = index.get(item.slice_id)
            payload = {
                "rank": rank,
                "slice_id": item.slice_id,
                "distance": item.distance,
                "is_abnormal": bool(entry.meta.get("is_abnormal", False)),
                "abnormality_score": entry.abnormality_score,
                "meta": entry.meta,
            }
            if req.include_previews and item.slice_id in slices:
                slc = slices[item.slice_id]
                payload["preview"] = previews.get_or_compute(
                    item.slice_id, lambda s=slc: decode_previews(model, s))
                payload["thumbnail"] = thumbnails.get_or_compute(
                    item.slice_id, lambda s=slc: array_to_png_b64(s.pixels, THUMBNAIL_SIZE))
            items.append(payload)
        return {
            "metric": result.metric,
            "k": req.k,
            "provenance": result.provenance,
            "query_score": result.query_score,
            "items": items,
        }

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def load_app(checkpoint_path, index_path, slices_dir, ui_dir=None) -> FastAPI:
    """Build the app from on-disk artifacts."""
    model = restore_model(load_checkpoint(checkpoint_path))
    index = load_index(index_path)
    archive = {slc.id: slc for slc in load_slices(slices_dir)}
    return create_app(model, index, archive, ui_dir=ui_dir)


def serve(app: FastAPI, host: str = "127.0.0.1", port: int = 8000):
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="info")
