"""Training objectives.

Segmentation (generalized Dice + cross-entropy), reconstruction (pixel L2 +
SSIM, masked by the abnormality region), residual consistency between the two
reconstructions, and the latent/discrimination terms from the quantizer —
combined into the weighted total objective.  Squared-error terms are means
over elements throughout, so the weights keep a consistent interpretation
across image sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from anatomy_cbir.networks import AnatomyCodec
from anatomy_cbir.quantizer import (
    DEFAULT_BETA,
    DEFAULT_PI,
    discrimination_loss,
    latent_loss,
    quantize,
    straight_through,
)
from anatomy_cbir.slices import AbnormalityMask

DICE_EPS = 1e-6
CE_EPS = 1e-12
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossWeights:
    """Weights of the total objective; defaults follow the reference recipe."""

    lambda_dis: float = 1.0
    lambda_seg: float = 1.0
    lambda_rec: float = 1.0e4
    lambda_res: float = 1.0
    pi: float = DEFAULT_PI
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        for name in ("lambda_dis", "lambda_seg", "lambda_rec", "lambda_res", "pi", "beta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda_dis": self.lambda_dis,
            "lambda_seg": self.lambda_seg,
            "lambda_rec": self.lambda_rec,
            "lambda_res": self.lambda_res,
            "pi": self.pi,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class LossReport:
    """Every term of one batch's objective; `total` is the weighted sum."""

    lat: torch.Tensor
    dis: torch.Tensor
    seg: torch.Tensor
    rec: torch.Tensor
    res: torch.Tensor
    total: torch.Tensor
    dice: torch.Tensor
    entropy: torch.Tensor
    rec_minus: torch.Tensor
    rec_plus: torch.Tensor

    def to_dict(self) -> dict:
        return {name: float(getattr(self, name).detach()) for name in (
            "lat", "dis", "seg", "rec", "res", "total",
            "dice", "entropy", "rec_minus", "rec_plus")}


def _seg_pair(probs: torch.Tensor, y: torch.Tensor):
    """Normalize (probs, one-hot-foreground) to batched form and validate."""
    if probs.dim() == 3:
        probs = probs[None]
    if y.dim() == 3:
        y = y[None]
    if probs.dim() != 4 or y.dim() != 4:
        raise ValueError("expected (C+1,H,W)/(C,H,W) or batched variants")
    if probs.shape[0] != y.shape[0] or probs.shape[-2:] != y.shape[-2:]:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs y {tuple(y.shape)}")
    if probs.shape[1] != y.shape[1] + 1:
        raise ValueError("probs must carry one extra (background) channel over y")
    return probs, y


def dice_loss(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Generalized Dice over the foreground classes.

    Class weights 1/((sum y_k)^2 + eps) counter class imbalance; a smooth
    addend in numerator and denominator makes the all-empty case score as
    perfect overlap instead of 0/0.
    """
    probs, y = _seg_pair(probs, y)
    fg = probs[:, : y.shape[1]]
    inter = (fg * y).sum(dim=(2, 3))
    psum = fg.sum(dim=(2, 3))
    ysum = y.sum(dim=(2, 3))
    w = 1.0 / (ysum.square() + DICE_EPS)
    num = 2.0 * (w * inter).sum(dim=1) + DICE_EPS
    den = (w * (psum + ysum)).sum(dim=1) + DICE_EPS
    return (1.0 - num / den).mean()


def cross_entropy_loss(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel cross-entropy over all channels; pixels with no
    foreground label count toward the background channel."""
    probs, y = _seg_pair(probs, y)
    background = (1.0 - y.sum(dim=1, keepdim=True)).clamp(0.0, 1.0)
    y_full = torch.cat([y, background], dim=1)
    log_p = torch.log(probs.clamp_min(CE_EPS))
    return -(y_full * log_p).sum(dim=1).mean()


def segmentation_loss(probs: torch.Tensor, y: torch.Tensor):
    d = dice_loss(probs, y)
    e = cross_entropy_loss(probs, y)
    return d + e, d, e


def gaussian_window(size: int, sigma: float, *, dtype=None, device=None) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype or torch.float32, device=device)
    coords = coords - (size - 1) / 2.0
    g = torch.exp(-coords.square() / (2.0 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def _image_batch(a: torch.Tensor) -> torch.Tensor:
    if a.dim() == 2:
        return a[None, None]
    if a.dim() == 3:
        return a[None]
    if a.dim() == 4:
        return a
    raise ValueError(f"expected (H,W), (1,H,W) or (B,1,H,W), got {tuple(a.shape)}")


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Mean local structural similarity with a Gaussian window.

    Valid convolution only (no padding); the window shrinks to the largest odd
    size that fits when the images are smaller than the default 11x11.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    a4, b4 = _image_batch(a), _image_batch(b)
    h, w = a4.shape[-2:]
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 1:
        raise ValueError("image too small for SSIM")
    kernel = gaussian_window(win, sigma, dtype=a4.dtype, device=a4.device)[None, None]
    mu_a = F.conv2d(a4, kernel)
    mu_b = F.conv2d(b4, kernel)
    var_a = F.conv2d(a4 * a4, kernel) - mu_a * mu_a
    var_b = F.conv2d(b4 * b4, kernel) - mu_b * mu_b
    cov = F.conv2d(a4 * b4, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean()


def _coerce_mask(mask, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, AbnormalityMask):
        mask = mask.M
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(np.ascontiguousarray(mask))
    mask = mask.to(dtype=like.dtype, device=like.device)
    if mask.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"mask spatial shape {tuple(mask.shape[-2:])} does not match "
                         f"images {tuple(like.shape[-2:])}")
    while mask.dim() < like.dim():
        mask = mask[None]
    return mask


def reconstruction_terms(x: torch.Tensor, x_hat_minus: torch.Tensor,
                         x_hat_plus: torch.Tensor, mask):
    """The two reconstruction terms: pseudo-normal vs normal region, and the
    full reconstruction with extra weight inside the abnormal region."""
    if not (x.shape == x_hat_minus.shape == x_hat_plus.shape):
        raise ValueError("image shapes must match")
    m = _coerce_mask(mask, x)
    m_bar = 1.0 - m
    def msq(p, q):
        return (p - q).square().mean()
    rec_minus = (msq(m_bar * x_hat_minus, m_bar * x)
                 + (1.0 - ssim(m_bar * x_hat_minus, m_bar * x)))
    rec_plus = (msq(x_hat_plus, x)
                + (1.0 - ssim(x_hat_plus, x))
                + msq(m * x_hat_plus, m * x)
                + (1.0 - ssim(m * x_hat_plus, m * x)))
    return rec_minus, rec_plus


def reconstruction_loss(x: torch.Tensor, x_hat_minus: torch.Tensor,
                        x_hat_plus: torch.Tensor, mask) -> torch.Tensor:
    rec_minus, rec_plus = reconstruction_terms(x, x_hat_minus, x_hat_plus, mask)
    return rec_minus + rec_plus


def residual_loss(x_hat_minus: torch.Tensor, x_hat_plus: torch.Tensor, mask) -> torch.Tensor:
    """Mean L1 between the two reconstructions outside the abnormal region."""
    if x_hat_minus.shape != x_hat_plus.shape:
        raise ValueError("image shapes must match")
    m_bar = 1.0 - _coerce_mask(mask, x_hat_minus)
    return (m_bar * (x_hat_minus - x_hat_plus)).abs().mean()


def lesion_position_grid(mask, z_like: torch.Tensor) -> torch.Tensor:
    """Downsample the abnormality mask to the code grid.

    A position counts as lesion-bearing when any pixel of its patch is inside
    the abnormal region; returns (B, 1, h, w) in {0, 1} matching the spatial
    shape of ``z_like``.
    """
    if isinstance(mask, AbnormalityMask):
        mask = mask.M
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(np.ascontiguousarray(mask))
    mask = mask.to(dtype=z_like.dtype, device=z_like.device)
    if mask.dim() == 2:
        mask = mask[None, None]
    elif mask.dim() == 3:
        mask = mask[:, None]
    elif mask.dim() != 4:
        raise ValueError(f"expected a 2- to 4-dim mask, got {tuple(mask.shape)}")
    return F.adaptive_max_pool2d(mask, z_like.shape[-2:])


def masked_latent_loss(z_e: torch.Tensor, z_q: torch.Tensor,
                       positions: torch.Tensor, beta: float) -> torch.Tensor:
    """Per-sample latent loss restricted to the marked code positions.

    Means are over the selected elements only, so the value matches the plain
    latent loss evaluated on the sub-grid; samples with no marked position
    contribute zero.
    """
    if z_e.dim() != 4:
        raise ValueError(f"expected batched codes, got {tuple(z_e.shape)}")
    denom = (positions.sum(dim=(1, 2, 3)) * z_e.shape[1]).clamp_min(1.0)
    code = ((z_e.detach() - z_q).square() * positions).sum(dim=(1, 2, 3)) / denom
    commit = ((z_e - z_q.detach()).square() * positions).sum(dim=(1, 2, 3)) / denom
    return code + beta * commit


def total_loss(*, lat, dis, seg, rec, res, weights: LossWeights,
               dice=None, entropy=None, rec_minus=None, rec_plus=None) -> LossReport:
    def t(v):
        return v if isinstance(v, torch.Tensor) else torch.as_tensor(float(v))
    lat, dis, seg, rec, res = map(t, (lat, dis, seg, rec, res))
    total = (lat + weights.lambda_dis * dis + weights.lambda_seg * seg
             + weights.lambda_rec * rec + weights.lambda_res * res)
    zero = torch.zeros_like(total)
    return LossReport(
        lat=lat, dis=dis, seg=seg, rec=rec, res=res, total=total,
        dice=t(dice) if dice is not None else zero,
        entropy=t(entropy) if entropy is not None else zero,
        rec_minus=t(rec_minus) if rec_minus is not None else zero,
        rec_plus=t(rec_plus) if rec_plus is not None else zero,
    )


@dataclass
class BatchForward:
    """Everything produced by one training forward pass."""

    report: LossReport
    z_e_minus: torch.Tensor
    z_e_plus: torch.Tensor
    z_q_minus: torch.Tensor
    z_q_plus: torch.Tensor
    indices_minus: torch.Tensor
    indices_plus: torch.Tensor
    seg_logits: torch.Tensor
    x_hat_minus: torch.Tensor
    x_hat_plus: torch.Tensor
    commitment_plus: torch.Tensor


def forward_batch(model: AnatomyCodec, x: torch.Tensor, y: torch.Tensor,
                  mask: torch.Tensor, is_abnormal: torch.Tensor,
                  weights: LossWeights) -> BatchForward:
    """Full training pass for one batch.

    The normal path always takes the standard latent loss.  On the abnormal
    path the anchor is selective: abnormal slices pull the book toward their
    lesion-bearing code positions only, never toward their background — the
    background carries the same healthy content the hinge is busy pushing the
    book away from, and anchoring it there would pin the rows between the two
    forces.  Normal slices take the hinge everywhere, which drives their
    content and the rows serving it apart until the margin pi is cleared.
    """
    enc = model.encode(x)
    q_minus = quantize(enc.z_e_minus, model.book_normal)
    q_plus = quantize(enc.z_e_plus, model.book_abnormal)
    flags = is_abnormal.to(dtype=x.dtype)
    batch = x.shape[0]

    lat_minus = latent_loss(enc.z_e_minus, q_minus, weights.beta)
    pos = lesion_position_grid(mask, enc.z_e_plus)
    lat_plus_per = masked_latent_loss(enc.z_e_plus, q_plus.z_q, pos, weights.beta)
    hinge_per = discrimination_loss(enc.z_e_plus, q_plus, weights.pi, per_sample=True)
    lat = lat_minus + (flags * lat_plus_per).sum() / batch
    dis = ((1.0 - flags) * hinge_per).sum() / batch

    st_minus = straight_through(enc.z_e_minus, q_minus.z_q)
    st_plus = straight_through(enc.z_e_plus, q_plus.z_q)
    seg_logits = model.seg_decoder(st_plus)
    probs = torch.softmax(seg_logits, dim=1)
    seg, dice, entropy = segmentation_loss(probs, y)

    layout = seg_logits[:, : model.num_classes]
    x_hat_plus = model.image_decoder(st_minus, layout)
    x_hat_minus = model.image_decoder(st_minus, None)
    rec_minus, rec_plus = reconstruction_terms(x, x_hat_minus, x_hat_plus, mask)
    rec = rec_minus + rec_plus
    res = residual_loss(x_hat_minus, x_hat_plus, mask)

    report = total_loss(lat=lat, dis=dis, seg=seg, rec=rec, res=res, weights=weights,
                        dice=dice, entropy=entropy, rec_minus=rec_minus, rec_plus=rec_plus)
    return BatchForward(
        report=report,
        z_e_minus=enc.z_e_minus, z_e_plus=enc.z_e_plus,
        z_q_minus=q_minus.z_q, z_q_plus=q_plus.z_q,
        indices_minus=q_minus.indices, indices_plus=q_plus.indices,
        seg_logits=seg_logits, x_hat_minus=x_hat_minus, x_hat_plus=x_hat_plus,
        commitment_plus=q_plus.commitment_sq,
    )
