"""Ingestion of external 3D volumes into the canonical slice format.

Two container formats are supported:

* NIfTI-1 single-file volumes (``.nii`` / ``.nii.gz``), read by a minimal
  built-in parser (header fields: dim, datatype, vox_offset, scl slope/inter).
* A raw binary + JSON header fallback: ``name.raw`` next to ``name.json``
  holding ``{"dims": [S, H, W], "dtype": "float32", "spacing": [...]}``.

Volumes are min-max normalized per volume into [0, 1] and separated into
axial slices; near-empty slices (nonzero fraction < 1%) are dropped.
"""

from __future__ import annotations

import gzip
import json
from pathlib import Path

import numpy as np

from anatomy_cbir.slices import CLASS_NAMES, ImageSlice

#: Slices whose nonzero-pixel fraction falls below this are considered empty.
EMPTY_SLICE_THRESHOLD = 0.01

#: NIfTI datatype codes -> numpy dtypes (the subset seen in practice).
_NIFTI_DTYPES = {
    2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32,
    64: np.float64, 256: np.int8, 512: np.uint16, 768: np.uint32,
}

#: BraTS segmentation label values -> class names.
BRATS_LABEL_MAP = {4: "ET", 1: "TC", 2: "ED"}


def read_nifti(path) -> np.ndarray:
    """Read a NIfTI-1 volume as (slices, H, W), slicing along the last stored axis."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise ValueError(f"{path}: too short to be a NIfTI-1 file")

    bo = "<"
    sizeof_hdr = int(np.frombuffer(raw, "<i4", count=1, offset=0)[0])
    if sizeof_hdr != 348:
        bo = ">"
        if int(np.frombuffer(raw, ">i4", count=1, offset=0)[0]) != 348:
            raise ValueError(f"{path}: bad NIfTI header (sizeof_hdr != 348)")
    if raw[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError(f"{path}: missing NIfTI magic")

    dim = np.frombuffer(raw, bo + "i2", count=8, offset=40)
    ndim = int(dim[0])
    if not 2 <= ndim <= 4:
        raise ValueError(f"{path}: unsupported ndim {ndim}")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    datatype = int(np.frombuffer(raw, bo + "i2", count=1, offset=70)[0])
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    vox_offset = int(np.frombuffer(raw, bo + "f4", count=1, offset=108)[0])
    scl_slope = float(np.frombuffer(raw, bo + "f4", count=1, offset=112)[0])
    scl_inter = float(np.frombuffer(raw, bo + "f4", count=1, offset=116)[0])

    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(bo)
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype, count=count, offset=vox_offset)
    vol = data.reshape(shape, order="F").astype(np.float64)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        vol = vol * slope + scl_inter
    if vol.ndim == 4:  # single-channel 4D volumes collapse to 3D
        if vol.shape[3] != 1:
            raise ValueError(f"{path}: multi-channel volumes not supported")
        vol = vol[..., 0]
    # (X, Y, Z) -> (Z, Y, X): axial slices along axis 0.
    return np.transpose(vol, (2, 1, 0))


def read_raw(path) -> np.ndarray:
    """Read a raw binary volume described by its JSON sidecar header."""
    path = Path(path)
    header_path = path.with_suffix(".json")
    if not header_path.exists():
        raise FileNotFoundError(f"missing JSON header {header_path}")
    header = json.loads(header_path.read_text())
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise ValueError(f"{path}: dims must be 3D, got {dims}")
    dtype = np.dtype(header.get("dtype", "float32"))
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ValueError(
            f"{path}: file holds {data.size} values, header dims {dims} "
            f"need {int(np.prod(dims))}"
        )
    return data.reshape(dims).astype(np.float64)


def _detect_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return "nifti"
    if name.endswith(".raw"):
        return "raw"
    raise ValueError(f"cannot infer volume format from {path.name}; pass format explicitly")


def _volume_stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".raw"):
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def ingest_volume(path, format: str = "auto", size: int | None = None,
                  labels_path=None) -> list:
    """Slice a 3D volume into normalized ImageSlices.

    ``labels_path`` may point to a matching segmentation volume with BraTS
    label values (4=ET, 1=TC, 2=ED); otherwise masks are empty.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume not found: {path}")
    fmt = _detect_format(path) if format == "auto" else format
    if fmt == "nifti":
        vol = read_nifti(path)
    elif fmt == "raw":
        vol = read_raw(path)
    else:
        raise ValueError(f"unknown volume format: {format}")

    n_slices, h, w = vol.shape
    if h != w:
        raise ValueError(f"{path}: slices must be square, got {h}x{w}")
    if size is not None and h != size:
        raise ValueError(f"{path}: slice size {h} does not match requested {size}")

    labels = None
    if labels_path is not None:
        lfmt = _detect_format(Path(labels_path)) if format == "auto" else format
        labels = read_nifti(labels_path) if lfmt == "nifti" else read_raw(labels_path)
        if labels.shape != vol.shape:
            raise ValueError(
                f"label volume shape {labels.shape} does not match image {vol.shape}"
            )

    vmin, vmax = float(vol.min()), float(vol.max())
    if vmax > vmin:
        vol = (vol - vmin) / (vmax - vmin)
    else:
        vol = np.zeros_like(vol)

    stem = _volume_stem(path)
    slices = []
    for k in range(n_slices):
        pixels = vol[k]
        if float((pixels > 0).mean()) < EMPTY_SLICE_THRESHOLD:
            continue
        masks = np.zeros((len(CLASS_NAMES), h, w), dtype=np.uint8)
        if labels is not None:
            for value, name in BRATS_LABEL_MAP.items():
                masks[CLASS_NAMES.index(name)] = (labels[k] == value).astype(np.uint8)
        slices.append(ImageSlice.create(
            id=f"{stem}_{k}",
            pixels=pixels,
            abnormal_masks=masks,
            meta={"source": str(path), "axial_index": k},
        ))
    return slices
