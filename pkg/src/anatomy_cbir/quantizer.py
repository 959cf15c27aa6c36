"""Dual-codebook vector quantization, its losses, and codebook persistence.

All squared-distance losses here are means over tensor elements, so the loss
weights stay resolution-independent; the discrimination threshold ``pi`` is
interpreted under the same convention.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

DEFAULT_NUM_CODES = 512
DEFAULT_CODE_DIM = 64
DEFAULT_BETA = 0.25
DEFAULT_PI = 10.0

CODEBOOK_TAGS = ("normal", "abnormal")


class Codebook(nn.Module):
    """K learnable D-dimensional code vectors, tagged normal or abnormal."""

    def __init__(self, num_codes: int = DEFAULT_NUM_CODES, dim: int = DEFAULT_CODE_DIM,
                 tag: str = "normal"):
        super().__init__()
        if num_codes < 2 or dim < 1:
            raise ValueError(f"need num_codes >= 2 and dim >= 1, got ({num_codes}, {dim})")
        if tag not in CODEBOOK_TAGS:
            raise ValueError(f"tag must be one of {CODEBOOK_TAGS}, got {tag!r}")
        self.num_codes = num_codes
        self.dim = dim
        self.tag = tag
        self.weight = nn.Parameter(torch.empty(num_codes, dim))
        nn.init.uniform_(self.weight, -1.0 / num_codes, 1.0 / num_codes)

    def as_array(self) -> np.ndarray:
        return self.weight.detach().cpu().numpy()

    def extra_repr(self) -> str:
        return f"num_codes={self.num_codes}, dim={self.dim}, tag={self.tag}"


@dataclass
class QuantizationResult:
    """Quantized codes plus the index grid and commitment distance.

    ``z_q`` is assembled from codebook rows (gradients reach the codebook,
    not the encoder); ``commitment_sq`` is the mean over elements of
    (z_e - sg[e])^2 and stays differentiable w.r.t. the encoder output.
    ``position_sq`` holds the per-position squared distances (summed over
    the code dimension).
    """

    z_q: torch.Tensor
    indices: torch.Tensor
    commitment_sq: torch.Tensor
    position_sq: torch.Tensor


def quantize(z_e: torch.Tensor, book: Codebook) -> QuantizationResult:
    """Replace each spatial position of z_e with its nearest code vector.

    Accepts (D, H, W) or (B, D, H, W); ties break toward the lowest index.
    """
    batched = z_e.dim() == 4
    z = z_e if batched else z_e.unsqueeze(0)
    if z.dim() != 4 or z.shape[1] != book.dim:
        raise ValueError(
            f"z_e must be (D={book.dim}, H, W) or batched, got {tuple(z_e.shape)}"
        )
    b, d, h, w = z.shape
    flat = z.permute(0, 2, 3, 1).reshape(-1, d)

    weight = book.weight.to(flat.dtype)
    # ||z||^2 + ||e||^2 - 2 z.e for selection; torch.argmin returns the first
    # (lowest) index among equal minima.
    with torch.no_grad():
        d2 = (flat.pow(2).sum(1, keepdim=True)
              - 2.0 * flat @ weight.t()
              + weight.pow(2).sum(1)[None, :])
        idx = torch.argmin(d2, dim=1)

    z_q_flat = weight[idx]
    z_q = z_q_flat.reshape(b, h, w, d).permute(0, 3, 1, 2)

    diff = z - z_q.detach()
    commitment = diff.pow(2).mean(dim=(1, 2, 3))
    position_sq = diff.detach().pow(2).sum(dim=1)
    indices = idx.reshape(b, h, w)

    if not batched:
        z_q = z_q.squeeze(0)
        indices = indices.squeeze(0)
        commitment = commitment.squeeze(0)
        position_sq = position_sq.squeeze(0)
    return QuantizationResult(z_q=z_q, indices=indices,
                              commitment_sq=commitment, position_sq=position_sq)


def latent_loss(z_e: torch.Tensor, result: QuantizationResult,
                beta: float = DEFAULT_BETA, per_sample: bool = False):
    """Codebook term + beta * commitment term, both means over elements.

    The stop-gradients make term 1 update only the codebook and term 2 only
    the encoder.
    """
    dims = tuple(range(1, z_e.dim())) if per_sample else None
    codebook_term = (z_e.detach() - result.z_q).pow(2)
    commitment_term = (z_e - result.z_q.detach()).pow(2)
    if dims is None:
        return codebook_term.mean() + beta * commitment_term.mean()
    return codebook_term.mean(dim=dims) + beta * commitment_term.mean(dim=dims)


def discrimination_loss(z_e: torch.Tensor, result: QuantizationResult,
                        pi: float = DEFAULT_PI, per_sample: bool = False):
    """Hinge max(pi - d^2, 0) on the live mean squared distance between z_e
    and its selected codes.

    Unlike the commitment term, neither side is stop-gradiented: descent
    pushes the encoder output and the selected rows apart, so rows assigned
    to lesion-free content vacate it (they move ten times faster than the
    activations under the codebook lr group) and the abnormal book ends up
    covering abnormal patterns only.  The value equals
    max(pi - commitment_sq, 0); only the gradient routing differs.
    """
    if pi <= 0:
        raise ValueError(f"pi must be positive, got {pi}")
    dims = tuple(range(1, z_e.dim())) if per_sample else None
    live = (z_e - result.z_q).pow(2)
    live = live.mean() if dims is None else live.mean(dim=dims)
    return torch.clamp(pi - live, min=0.0)


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value z_q; gradients pass through to z_e unchanged."""
    if z_e.shape != z_q.shape:
        raise ValueError(f"shape mismatch: {tuple(z_e.shape)} vs {tuple(z_q.shape)}")
    return z_e + (z_q - z_e).detach()


def abnormality_score(z_e_plus: torch.Tensor, book_abnormal: Codebook):
    """Commitment distance on the abnormal path; large values look normal.

    Callers may threshold at pi to flag a slice as normal.  Returns a float
    for a single (D, H, W) input, a tensor for batched input.
    """
    score = quantize(z_e_plus, book_abnormal).commitment_sq.detach()
    return float(score) if score.dim() == 0 else score


# ---------------------------------------------------------------------------
# Persistence: raw float32 blob + JSON sidecar.
# ---------------------------------------------------------------------------

def save_codebook(book: Codebook, path, step: int = 0) -> Path:
    """Write K x D float32 values to `path` and a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = book.as_array().astype("<f4")
    arr.tofile(path)
    sidecar = {
        "num_codes": book.num_codes,
        "dim": book.dim,
        "tag": book.tag,
        "step": step,
        "dtype": "float32",
        "byte_order": "little",
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    return path


def load_codebook(path) -> Codebook:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.fromfile(path, dtype="<f4").reshape(sidecar["num_codes"], sidecar["dim"])
    book = Codebook(sidecar["num_codes"], sidecar["dim"], sidecar["tag"])
    with torch.no_grad():
        book.weight.copy_(torch.from_numpy(arr.astype(np.float32)))
    return book


def codebook_fingerprint(*books: Codebook) -> str:
    """Stable hash over codebook contents; identifies the encoder snapshot."""
    h = hashlib.sha256()
    for book in books:
        h.update(book.tag.encode())
        h.update(np.ascontiguousarray(book.as_array(), dtype="<f4").tobytes())
    return h.hexdigest()[:16]
