"""Retrieval over decomposed anatomy codes.

Every reference slice is stored as a pair of flattened quantized codes (normal
and abnormal path).  Queries run as exact exhaustive L2 scans under three
metrics — normal codes only, abnormal codes only, or their concatenation — and
two pairs from different sources can be mixed into a single query that looks
for "this anatomy with that lesion".
"""

from __future__ import annotations

import datetime as _dt
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from anatomy_cbir import kernels
from anatomy_cbir.networks import AnatomyCodec
from anatomy_cbir.quantizer import Codebook, codebook_fingerprint, quantize

METRICS = ("normal", "abnormal", "concat")
INDEX_KIND = "anatomy-cbir-index"
INDEX_FORMAT = 1


@dataclass(frozen=True)
class AnatomyCodePair:
    """Both quantized codes of one slice, flattened, plus bookkeeping."""

    slice_id: str
    code_minus: np.ndarray
    code_plus: np.ndarray
    indices_minus: np.ndarray
    indices_plus: np.ndarray
    abnormality_score: float
    codebook_hash: str
    meta: dict = field(default_factory=dict)
    provenance: tuple | None = None

    def vector(self, metric: str) -> np.ndarray:
        if metric == "normal":
            return self.code_minus
        if metric == "abnormal":
            return self.code_plus
        if metric == "concat":
            return np.concatenate([self.code_minus, self.code_plus])
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")


@dataclass
class RankedItem:
    slice_id: str
    distance: float

    def to_dict(self) -> dict:
        return {"slice_id": self.slice_id, "distance": self.distance}


@dataclass
class RetrievalResult:
    metric: str
    items: list
    provenance: dict
    query_score: float

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "items": [it.to_dict() for it in self.items],
            "provenance": self.provenance,
            "query_score": self.query_score,
        }


class RetrievalIndex:
    """Immutable collection of code pairs with cached scan matrices."""

    def __init__(self, entries, codebook_hash: str, metric_default: str = "concat",
                 created: str | None = None):
        entries = tuple(entries)
        ids = [e.slice_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate slice ids in index")
        for e in entries:
            if e.codebook_hash != codebook_hash:
                raise ValueError(f"entry {e.slice_id} was built with a different codebook")
        if metric_default not in METRICS:
            raise ValueError(f"metric_default must be one of {METRICS}")
        self._entries = entries
        self._by_id = {e.slice_id: e for e in entries}
        self.codebook_hash = codebook_hash
        self.metric_default = metric_default
        self.created = created or _dt.datetime.now(_dt.timezone.utc).isoformat()
        self._matrices: dict[str, np.ndarray] = {}
        # rank of each entry under lexicographic id order, for stable ties
        self._id_rank = np.argsort(np.argsort(np.asarray(ids)))

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self):
        return self._entries

    @property
    def ids(self):
        return [e.slice_id for e in self._entries]

    def __contains__(self, slice_id: str) -> bool:
        return slice_id in self._by_id

    def get(self, slice_id: str) -> AnatomyCodePair:
        try:
            return self._by_id[slice_id]
        except KeyError:
            raise KeyError(f"unknown slice id {slice_id!r}") from None

    def matrix(self, metric: str) -> np.ndarray:
        if metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
        if metric not in self._matrices:
            rows = [e.vector(metric) for e in self._entries]
            self._matrices[metric] = np.asarray(rows, dtype=np.float64)
        return self._matrices[metric]


def _flatten_code(z_q: torch.Tensor) -> np.ndarray:
    arr = np.ascontiguousarray(z_q.detach().cpu().numpy(), dtype=np.float32).ravel()
    arr.flags.writeable = False
    return arr


def codes_from_indices(indices: np.ndarray, book: Codebook) -> np.ndarray:
    """Dequantize an index grid back to the flattened code vector."""
    weight = book.as_array()
    grid = weight[indices.astype(np.int64)]          # (H', W', D)
    return np.ascontiguousarray(np.transpose(grid, (2, 0, 1)), dtype=np.float32).ravel()


def verify_entry(entry: AnatomyCodePair, book_normal: Codebook,
                 book_abnormal: Codebook, atol: float = 0.0) -> bool:
    """Consistency check: stored codes must be reconstructible from the index
    grids and the codebook snapshot."""
    ok_minus = np.allclose(entry.code_minus,
                           codes_from_indices(entry.indices_minus, book_normal), atol=atol)
    ok_plus = np.allclose(entry.code_plus,
                          codes_from_indices(entry.indices_plus, book_abnormal), atol=atol)
    return bool(ok_minus and ok_plus)


def encode_pair(model: AnatomyCodec, x: torch.Tensor, slice_id: str,
                meta: dict | None = None) -> AnatomyCodePair:
    """Encode + quantize one slice tensor (1,H,W) into its code pair."""
    cb_hash = codebook_fingerprint(model.book_normal, model.book_abnormal)
    with torch.no_grad():
        enc = model.encode(x[None] if x.dim() == 3 else x)
        q_minus = quantize(enc.z_e_minus, model.book_normal)
        q_plus = quantize(enc.z_e_plus, model.book_abnormal)
    return AnatomyCodePair(
        slice_id=slice_id,
        code_minus=_flatten_code(q_minus.z_q[0]),
        code_plus=_flatten_code(q_plus.z_q[0]),
        indices_minus=q_minus.indices[0].cpu().numpy().astype(np.int32),
        indices_plus=q_plus.indices[0].cpu().numpy().astype(np.int32),
        abnormality_score=float(q_plus.commitment_sq[0]),
        codebook_hash=cb_hash,
        meta=dict(meta or {}),
    )


def build_index(model: AnatomyCodec, slices, batch_size: int = 8,
                metric_default: str = "concat") -> RetrievalIndex:
    """Encode and quantize every slice into the reference index."""
    from anatomy_cbir.trainer import _collate  # avoids a module cycle at import

    model.eval()
    cb_hash = codebook_fingerprint(model.book_normal, model.book_abnormal)
    entries = []
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            batch = slices[start:start + batch_size]
            x, _, _, flags = _collate(batch, model.image_size)
            enc = model.encode(x)
            q_minus = quantize(enc.z_e_minus, model.book_normal)
            q_plus = quantize(enc.z_e_plus, model.book_abnormal)
            for i, slc in enumerate(batch):
                meta = dict(slc.meta)
                meta["is_abnormal"] = bool(flags[i])
                entries.append(AnatomyCodePair(
                    slice_id=slc.id,
                    code_minus=_flatten_code(q_minus.z_q[i]),
                    code_plus=_flatten_code(q_plus.z_q[i]),
                    indices_minus=q_minus.indices[i].cpu().numpy().astype(np.int32),
                    indices_plus=q_plus.indices[i].cpu().numpy().astype(np.int32),
                    abnormality_score=float(q_plus.commitment_sq[i]),
                    codebook_hash=cb_hash,
                    meta=meta,
                ))
    return RetrievalIndex(entries, cb_hash, metric_default=metric_default)


def distance(q: AnatomyCodePair, r: AnatomyCodePair, metric: str) -> float:
    """L2 distance between two code pairs under the chosen metric."""
    if q.codebook_hash != r.codebook_hash:
        raise ValueError("codebook mismatch between code pairs")
    a = q.vector(metric).astype(np.float64)
    b = r.vector(metric).astype(np.float64)
    diff = a - b
    return float(np.sqrt(diff @ diff))


def query_topk(index: RetrievalIndex, q: AnatomyCodePair, metric: str,
               k: int) -> RetrievalResult:
    """Exhaustive scan, ascending distance, ties broken by slice id."""
    if len(index) == 0:
        raise ValueError("index is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if q.codebook_hash != index.codebook_hash:
        raise ValueError("codebook mismatch between query and index")
    refs = index.matrix(metric)
    vec = q.vector(metric).astype(np.float64)
    d2 = kernels.sq_l2_to_refs(vec, refs)
    dist = np.sqrt(np.maximum(d2, 0.0))
    order = np.lexsort((index._id_rank, dist))
    ids = index.ids
    items = [RankedItem(ids[i], float(dist[i])) for i in order[:k]]
    if q.provenance is not None:
        prov = {"normal_source_id": q.provenance[0], "abnormal_source_id": q.provenance[1]}
    else:
        prov = {"normal_source_id": q.slice_id, "abnormal_source_id": q.slice_id}
    return RetrievalResult(metric=metric, items=items, provenance=prov,
                           query_score=q.abnormality_score)


def mix_codes(normal_source: AnatomyCodePair,
              abnormal_source: AnatomyCodePair) -> AnatomyCodePair:
    """Normal code from one slice, abnormal code from another."""
    if normal_source.codebook_hash != abnormal_source.codebook_hash:
        raise ValueError("codebook mismatch between sources")
    return AnatomyCodePair(
        slice_id=f"mix({normal_source.slice_id},{abnormal_source.slice_id})",
        code_minus=normal_source.code_minus,
        code_plus=abnormal_source.code_plus,
        indices_minus=normal_source.indices_minus,
        indices_plus=abnormal_source.indices_plus,
        abnormality_score=abnormal_source.abnormality_score,
        codebook_hash=normal_source.codebook_hash,
        meta={},
        provenance=(normal_source.slice_id, abnormal_source.slice_id),
    )


# ---------------------------------------------------------------------------
# Persistence: zip of JSON manifest + raw little-endian matrices.
# ---------------------------------------------------------------------------

def save_index(index: RetrievalIndex, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(index)
    first = index.entries[0]
    manifest = {
        "kind": INDEX_KIND,
        "format_version": INDEX_FORMAT,
        "codebook_hash": index.codebook_hash,
        "metric_default": index.metric_default,
        "created": index.created,
        "count": n,
        "code_length": int(first.code_minus.size),
        "grid": list(first.indices_minus.shape),
        "ids": index.ids,
        "abnormality_scores": [e.abnormality_score for e in index.entries],
        "meta": {e.slice_id: e.meta for e in index.entries},
    }

    def as_blob(stack, dtype):
        return np.ascontiguousarray(np.stack(stack), dtype=dtype).tobytes()

    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("code_minus.bin", as_blob([e.code_minus for e in index.entries], "<f4"))
        zf.writestr("code_plus.bin", as_blob([e.code_plus for e in index.entries], "<f4"))
        zf.writestr("indices_minus.bin", as_blob([e.indices_minus for e in index.entries], "<i4"))
        zf.writestr("indices_plus.bin", as_blob([e.indices_plus for e in index.entries], "<i4"))
    return path


def load_index(path) -> RetrievalIndex:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("kind") != INDEX_KIND:
            raise ValueError(f"{path} is not a retrieval index archive")
        n = manifest["count"]
        length = manifest["code_length"]
        grid = tuple(manifest["grid"])

        def read_mat(name, dtype, shape):
            arr = np.frombuffer(zf.read(name), dtype=dtype).reshape(shape)
            return arr

        code_minus = read_mat("code_minus.bin", "<f4", (n, length))
        code_plus = read_mat("code_plus.bin", "<f4", (n, length))
        idx_minus = read_mat("indices_minus.bin", "<i4", (n, *grid))
        idx_plus = read_mat("indices_plus.bin", "<i4", (n, *grid))
    entries = []
    for i, slice_id in enumerate(manifest["ids"]):
        entries.append(AnatomyCodePair(
            slice_id=slice_id,
            code_minus=code_minus[i],
            code_plus=code_plus[i],
            indices_minus=idx_minus[i],
            indices_plus=idx_plus[i],
            abnormality_score=float(manifest["abnormality_scores"][i]),
            codebook_hash=manifest["codebook_hash"],
            meta=manifest.get("meta", {}).get(slice_id, {}),
        ))
    return RetrievalIndex(entries, manifest["codebook_hash"],
                          metric_default=manifest.get("metric_default", "concat"),
                          created=manifest.get("created"))
