"""Encoder, segmentation decoder, and SPADE-conditioned image decoder.

The encoder shares one trunk (5x5 stem + four residual stages with 2x average
pooling) and splits into two 3x3 heads producing the normal- and abnormal-path
features at 1/32 resolution.  Both decoders share the same upsampling stack;
the segmentation decoder normalizes with batch statistics while the image
decoder swaps in spatially-adaptive modulation driven by the segmentation
logits (or an all-zero layout for the pseudo-normal output).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from anatomy_cbir.quantizer import Codebook

STEM_CHANNELS = 32
ENCODER_STAGES = (64, 128, 256, 512)
DECODER_BOTTLENECK = 512
DECODER_STAGES = (256, 128, 64, 32, 16)
NUM_ABNORMAL_CLASSES = 3
DOWNSAMPLE_FACTOR = 2 ** (len(ENCODER_STAGES) + 1)  # stem pool + one per stage


@dataclass
class EncoderOutput:
    z_e_minus: torch.Tensor
    z_e_plus: torch.Tensor


@dataclass
class SegmentationOutput:
    """Per-pixel class logits with softmax probabilities and hard labels.

    Channels 0..2 are the abnormal classes (ET, TC, ED); the last channel is
    background, so label_map == 3 means "no abnormality".
    """

    logits: torch.Tensor
    probs: torch.Tensor
    label_map: torch.Tensor


class SpadeNorm(nn.Module):
    """Normalize with batch statistics, then modulate per pixel from a layout.

    gamma/beta come from small convs on the layout, which is average-pooled
    down to the feature resolution first: out = bn(x) * (1 + gamma) + beta.
    """

    def __init__(self, norm_nc: int, label_nc: int = NUM_ABNORMAL_CLASSES, hidden: int = 32):
        super().__init__()
        self.param_free_norm = nn.BatchNorm2d(norm_nc, affine=False)
        self.mlp_shared = nn.Sequential(
            nn.Conv2d(label_nc, hidden, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.mlp_gamma = nn.Conv2d(hidden, norm_nc, kernel_size=3, padding=1)
        self.mlp_beta = nn.Conv2d(hidden, norm_nc, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, layout: torch.Tensor) -> torch.Tensor:
        normalized = self.param_free_norm(x)
        if layout.shape[-2:] != x.shape[-2:]:
            layout = F.adaptive_avg_pool2d(layout, x.shape[-2:])
        actv = self.mlp_shared(layout)
        gamma = self.mlp_gamma(actv)
        beta = self.mlp_beta(actv)
        return normalized * (1.0 + gamma) + beta


class EncoderResBlock(nn.Module):
    """Pre-activation residual block; 1x1-projected skip when channels change."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.proj = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x):
        h = self.conv1(F.relu(x))
        h = self.conv2(F.relu(h))
        skip = x if self.proj is None else self.proj(x)
        return skip + h


class DecoderResBlock(nn.Module):
    """Pre-activation residual block with batch-statistics or SPADE normalization."""

    def __init__(self, ch: int, conditional: bool, label_nc: int = NUM_ABNORMAL_CLASSES,
                 spade_hidden: int = 32):
        super().__init__()
        self.conditional = conditional
        if conditional:
            self.norm1 = SpadeNorm(ch, label_nc, spade_hidden)
            self.norm2 = SpadeNorm(ch, label_nc, spade_hidden)
        else:
            self.norm1 = nn.BatchNorm2d(ch)
            self.norm2 = nn.BatchNorm2d(ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def _norm(self, norm, x, layout):
        return norm(x, layout) if self.conditional else norm(x)

    def forward(self, x, layout=None):
        h = self.conv1(F.relu(self._norm(self.norm1, x, layout)))
        h = self.conv2(F.relu(self._norm(self.norm2, h, layout)))
        return x + h


class Encoder(nn.Module):
    """Shared trunk down to 1/32 resolution, then two parallel 64-channel heads."""

    def __init__(self, code_dim: int = 64, in_channels: int = 1):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, STEM_CHANNELS, 5, padding=2)
        self.pool = nn.AvgPool2d(2)
        blocks = []
        prev = STEM_CHANNELS
        for ch in ENCODER_STAGES:
            blocks.append(EncoderResBlock(prev, ch))
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.head_minus = nn.Conv2d(prev, code_dim, 3, padding=1)
        self.head_plus = nn.Conv2d(prev, code_dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        if x.dim() != 4 or x.shape[1] != self.stem.in_channels:
            raise ValueError(f"expected (B, {self.stem.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % DOWNSAMPLE_FACTOR or x.shape[-2] % DOWNSAMPLE_FACTOR:
            raise ValueError(f"input size must be divisible by {DOWNSAMPLE_FACTOR}")
        h = self.pool(self.stem(x))
        for block in self.blocks:
            h = self.pool(block(h))
        h = F.relu(h)
        return EncoderOutput(z_e_minus=self.head_minus(h), z_e_plus=self.head_plus(h))


class DecoderCore(nn.Module):
    """Shared decoder stack: conv-block to 512, five upsample+res stages, 5x5 head."""

    def __init__(self, out_channels: int, conditional: bool, code_dim: int = 64,
                 label_nc: int = NUM_ABNORMAL_CLASSES, spade_hidden: int = 32):
        super().__init__()
        self.conditional = conditional
        self.conv_in1 = nn.Conv2d(code_dim, DECODER_BOTTLENECK, 3, padding=1)
        self.conv_in2 = nn.Conv2d(DECODER_BOTTLENECK, DECODER_BOTTLENECK, 3, padding=1)
        ups, blocks = [], []
        prev = DECODER_BOTTLENECK
        for ch in DECODER_STAGES:
            ups.append(nn.Conv2d(prev, ch, 3, padding=1))
            blocks.append(DecoderResBlock(ch, conditional, label_nc, spade_hidden))
            prev = ch
        self.up_convs = nn.ModuleList(ups)
        self.res_blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(prev, out_channels, 5, padding=2)

    def forward(self, z: torch.Tensor, layout: torch.Tensor | None = None,
                return_stages: bool = False):
        if self.conditional and layout is None:
            raise ValueError("conditional decoder needs a layout (pass zeros for null)")
        h = self.conv_in2(F.relu(self.conv_in1(z)))
        stages = []
        for up, block in zip(self.up_convs, self.res_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(h, layout) if self.conditional else block(h)
            if return_stages:
                stages.append(h)
        out = self.head(F.relu(h))
        return (out, stages) if return_stages else out


class SegmentationDecoder(nn.Module):
    """Maps the abnormal anatomy code to class logits over abnormal labels + background."""

    def __init__(self, code_dim: int = 64, num_classes: int = NUM_ABNORMAL_CLASSES):
        super().__init__()
        self.num_classes = num_classes
        self.core = DecoderCore(num_classes + 1, conditional=False, code_dim=code_dim)

    def forward(self, z_q_plus: torch.Tensor, return_stages: bool = False):
        return self.core(z_q_plus, return_stages=return_stages)

    def decode(self, z_q_plus: torch.Tensor) -> SegmentationOutput:
        logits = self.forward(z_q_plus)
        probs = torch.softmax(logits, dim=-3)
        return SegmentationOutput(logits=logits, probs=probs,
                                  label_map=logits.argmax(dim=-3))


class ImageDecoder(nn.Module):
    """SPADE-conditioned reconstruction from the normal anatomy code.

    With the segmentation logits as layout it reproduces the full image; with
    an all-zero layout it renders the pseudo-normal view.  The head is
    linear: mostly-background images make a sigmoid head saturate at the
    all-black constant (a dead local minimum for the squared error), so the
    output is unbounded here and only clamped to [0, 1] when rendered.
    """

    def __init__(self, code_dim: int = 64, label_nc: int = NUM_ABNORMAL_CLASSES,
                 spade_hidden: int = 32):
        super().__init__()
        self.label_nc = label_nc
        self.core = DecoderCore(1, conditional=True, code_dim=code_dim,
                                label_nc=label_nc, spade_hidden=spade_hidden)

    def forward(self, z_q_minus: torch.Tensor, layout: torch.Tensor | None = None,
                return_stages: bool = False):
        if layout is None:
            layout = self.null_layout(z_q_minus)
        return self.core(z_q_minus, layout, return_stages=return_stages)

    def null_layout(self, z_q_minus: torch.Tensor) -> torch.Tensor:
        """All-zero conditioning at the full output resolution."""
        b = z_q_minus.shape[0]
        size = z_q_minus.shape[-1] * DOWNSAMPLE_FACTOR
        return torch.zeros(b, self.label_nc, size, size,
                           dtype=z_q_minus.dtype, device=z_q_minus.device)


class AnatomyCodec(nn.Module):
    """Full model: encoder, the two codebooks, and both decoders."""

    def __init__(self, image_size: int = 256, num_codes: int = 512, code_dim: int = 64,
                 num_classes: int = NUM_ABNORMAL_CLASSES, spade_hidden: int = 32):
        super().__init__()
        if image_size % DOWNSAMPLE_FACTOR:
            raise ValueError(f"image_size must be divisible by {DOWNSAMPLE_FACTOR}")
        self.image_size = image_size
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.num_classes = num_classes
        self.spade_hidden = spade_hidden
        self.encoder = Encoder(code_dim=code_dim)
        self.book_normal = Codebook(num_codes, code_dim, tag="normal")
        self.book_abnormal = Codebook(num_codes, code_dim, tag="abnormal")
        self.seg_decoder = SegmentationDecoder(code_dim=code_dim, num_classes=num_classes)
        self.image_decoder = ImageDecoder(code_dim=code_dim, label_nc=num_classes,
                                          spade_hidden=spade_hidden)
        init_he_(self)

    @property
    def code_grid(self) -> int:
        return self.image_size // DOWNSAMPLE_FACTOR

    def config(self) -> dict:
        return {
            "image_size": self.image_size,
            "num_codes": self.num_codes,
            "code_dim": self.code_dim,
            "num_classes": self.num_classes,
            "spade_hidden": self.spade_hidden,
        }

    def architecture_hash(self) -> str:
        spec = dict(self.config())
        spec["params"] = [(name, list(p.shape)) for name, p in self.named_parameters()]
        blob = json.dumps(spec, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        return self.encoder(x)


def init_he_(model: nn.Module) -> None:
    """He initialization for convs; both decoder heads start at zero.

    A zeroed segmentation head makes an untrained network predict near-uniform
    class probabilities.  A zeroed image head makes the first reconstruction an
    exact black frame, so early optimizer steps are driven by the data rather
    than by a large random-output transient that would swamp the other loss
    terms under a shared Adam state.
    """
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    for m in model.modules():
        if isinstance(m, (SegmentationDecoder, ImageDecoder)):
            nn.init.zeros_(m.core.head.weight)
            nn.init.zeros_(m.core.head.bias)


def zero_modulation_(image_decoder: ImageDecoder) -> None:
    """Zero every SPADE gamma/beta conv, disabling the conditioning path."""
    for m in image_decoder.modules():
        if isinstance(m, SpadeNorm):
            for conv in (m.mlp_gamma, m.mlp_beta):
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)
