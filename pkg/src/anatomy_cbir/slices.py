"""Canonical 2D slice container, abnormality masks, and the slice archive format.

A slice archive is a directory of per-slice ``.npz`` files (pixels + class
masks) plus a ``manifest.json`` listing id, abnormality flag, per-class pixel
counts, and free-form metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

#: Abnormal label classes, in channel order.
CLASS_NAMES = ("ET", "TC", "ED")

#: Default canvas size; desk-scale runs may use 128.
CANONICAL_SIZE = 256

MANIFEST_NAME = "manifest.json"


@dataclass
class ImageSlice:
    """One grayscale slice with its abnormal-class masks.

    ``pixels`` is an H x W float array in [0, 1] (H == W); ``abnormal_masks``
    is a (3, H, W) binary array in CLASS_NAMES order with mutually disjoint
    classes.  ``is_abnormal`` is derived from the masks, so the flag can never
    disagree with them.
    """

    id: str
    pixels: np.ndarray
    abnormal_masks: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def is_abnormal(self) -> bool:
        return bool(self.abnormal_masks.any())

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def class_pixel_counts(self) -> dict:
        return {
            name: int(self.abnormal_masks[i].sum())
            for i, name in enumerate(CLASS_NAMES)
        }

    def validate(self) -> "ImageSlice":
        """Check the container invariants; raises ValueError on violation."""
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"slice {self.id}: pixels must be square 2D, got {self.pixels.shape}")
        if self.abnormal_masks.shape != (len(CLASS_NAMES),) + self.pixels.shape:
            raise ValueError(
                f"slice {self.id}: masks shape {self.abnormal_masks.shape} does not match "
                f"pixels {self.pixels.shape}"
            )
        if not np.isfinite(self.pixels).all():
            raise ValueError(f"slice {self.id}: non-finite pixels")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"slice {self.id}: pixel range [{lo}, {hi}] outside [0, 1]")
        if not np.isin(self.abnormal_masks, (0, 1)).all():
            raise ValueError(f"slice {self.id}: masks must be binary")
        if (self.abnormal_masks.sum(axis=0) > 1).any():
            raise ValueError(f"slice {self.id}: abnormal classes overlap")
        return self

    @classmethod
    def create(cls, id: str, pixels, abnormal_masks, meta=None) -> "ImageSlice":
        """Build a validated slice with normalized dtypes."""
        pixels = np.asarray(pixels, dtype=np.float32)
        abnormal_masks = np.asarray(abnormal_masks, dtype=np.uint8)
        return cls(id=id, pixels=pixels, abnormal_masks=abnormal_masks,
                   meta=dict(meta or {})).validate()


@dataclass
class AbnormalityMask:
    """Binary partition of a slice into abnormal (M) and normal (M_bar) regions.

    M_bar is derived as the complement, so M + M_bar == 1 holds pixelwise by
    construction.
    """

    M: np.ndarray

    @property
    def M_bar(self) -> np.ndarray:
        return (1 - self.M).astype(self.M.dtype)


def build_abnormality_mask(slc: ImageSlice) -> AbnormalityMask:
    """Union of the three class masks; pixels with any abnormal label become 1."""
    if slc.abnormal_masks.shape[0] != len(CLASS_NAMES):
        raise ValueError(f"expected {len(CLASS_NAMES)} class masks, got {slc.abnormal_masks.shape[0]}")
    union = np.any(slc.abnormal_masks > 0, axis=0).astype(np.uint8)
    return AbnormalityMask(M=union)


def save_slices(slices, out_dir, extra_manifest=None) -> Path:
    """Write a slice archive; returns the archive directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for slc in slices:
        slc.validate()
        np.savez_compressed(
            out_dir / f"{slc.id}.npz",
            pixels=slc.pixels.astype(np.float32),
            abnormal_masks=slc.abnormal_masks.astype(np.uint8),
        )
        entries.append({
            "id": slc.id,
            "is_abnormal": slc.is_abnormal,
            "pixel_counts": slc.class_pixel_counts(),
            "size": slc.size,
            "meta": _json_safe(slc.meta),
        })
    manifest = {"class_names": list(CLASS_NAMES), "slices": entries}
    if extra_manifest:
        manifest.update(extra_manifest)
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_slices(archive_dir) -> list:
    """Load every slice listed in the archive manifest, in manifest order."""
    archive_dir = Path(archive_dir)
    manifest_path = archive_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {archive_dir}")
    manifest = json.loads(manifest_path.read_text())
    slices = []
    for entry in manifest["slices"]:
        with np.load(archive_dir / f"{entry['id']}.npz") as data:
            slc = ImageSlice(
                id=entry["id"],
                pixels=data["pixels"],
                abnormal_masks=data["abnormal_masks"],
                meta=dict(entry.get("meta", {})),
            )
        slices.append(slc.validate())
    return slices


def load_manifest(archive_dir) -> dict:
    return json.loads((Path(archive_dir) / MANIFEST_NAME).read_text())


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
