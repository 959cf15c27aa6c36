"""Synthetic brain-like phantom slices with ground-truth lesion labels.

Phantoms stand in for gated clinical data: an elliptical "brain" with
ventricles and optional nested-ring lesions (necrotic core / enhancing rim /
edema surround).  Generation is a pure function of (seed, spec), so datasets
are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from anatomy_cbir.slices import CLASS_NAMES, CANONICAL_SIZE, ImageSlice

#: Innermost-to-outermost lesion rings as (class name, fraction of lesion radius).
DEFAULT_LAYERING = (("TC", 0.45), ("ET", 0.70), ("ED", 1.00))

#: Intensity offsets per class relative to base tissue, scaled by lesion contrast.
_CLASS_CONTRAST = {"TC": -0.8, "ET": 1.0, "ED": 0.45}

_TISSUE = 0.50
_SKULL = 0.85
_VENTRICLE = 0.12
_SKULL_WIDTH = 3.0


@dataclass
class PhantomSpec:
    """Geometry and content of one phantom slice.

    brain_axes are (row, col) semi-axes in pixels.  class_layering lists the
    nested rings innermost first as (class, radius fraction); the fractions
    must be increasing and end at 1.0.
    """

    seed: int
    size: int = CANONICAL_SIZE
    brain_axes: tuple = (100.0, 100.0)
    ventricle_scale: float = 1.0
    lesion_count: int = 0
    lesion_radius_range: tuple = (12.0, 24.0)
    class_layering: tuple = DEFAULT_LAYERING
    lesion_contrast: float = 0.35
    noise: float = 0.02
    volume_id: str = "PH0000"

    def validate(self):
        ry, rx = self.brain_axes
        margin = _SKULL_WIDTH + 2.0
        if ry + margin > self.size / 2 or rx + margin > self.size / 2:
            raise ValueError(
                f"brain axes {self.brain_axes} do not fit a {self.size}x{self.size} "
                f"canvas (need semi-axes < {self.size / 2 - margin:.1f})"
            )
        if self.lesion_count < 0:
            raise ValueError("lesion_count must be >= 0")
        lo, hi = self.lesion_radius_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad lesion_radius_range {self.lesion_radius_range}")
        fracs = [f for _, f in self.class_layering]
        if any(b <= a for a, b in zip(fracs, fracs[1:])) or abs(fracs[-1] - 1.0) > 1e-9:
            raise ValueError(f"class_layering fractions must increase to 1.0, got {fracs}")
        names = {name for name, _ in self.class_layering}
        if not names <= set(CLASS_NAMES):
            raise ValueError(f"unknown classes in layering: {names - set(CLASS_NAMES)}")
        if self.lesion_count > 0 and hi >= min(ry, rx) - margin:
            raise ValueError(
                f"max lesion radius {hi} too large for brain axes {self.brain_axes}"
            )
        return self


def _ellipse_mask(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec) -> ImageSlice:
    """Rasterize one phantom slice deterministically from its spec."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    cy = cx = (s - 1) / 2.0
    ry, rx = spec.brain_axes
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    brain = _ellipse_mask(yy, xx, cy, cx, ry, rx)
    inner = _ellipse_mask(yy, xx, cy, cx, ry - _SKULL_WIDTH, rx - _SKULL_WIDTH)
    skull = brain & ~inner

    # Base tissue with a gentle radial falloff so the interior is not flat.
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    img = np.zeros((s, s), dtype=np.float64)
    img[inner] = _TISSUE + 0.08 * (1.0 - r2[inner])
    img[skull] = _SKULL

    # Paired ventricles near the midline, scaled by ventricle_scale.
    v_ry = 0.18 * ry * spec.ventricle_scale
    v_rx = 0.08 * rx * spec.ventricle_scale
    v_off = 0.14 * rx
    for sign in (-1.0, 1.0):
        vent = _ellipse_mask(yy, xx, cy - 0.05 * ry, cx + sign * v_off, v_ry, v_rx)
        img[vent & inner] = _VENTRICLE

    # Lesions: nested rings, innermost class drawn last wins per pixel.
    class_map = np.zeros((s, s), dtype=np.int8)  # 0 = none, else 1-based CLASS_NAMES index
    for _ in range(spec.lesion_count):
        radius = float(rng.uniform(*spec.lesion_radius_range))
        ly, lx = _sample_lesion_center(rng, cy, cx, ry, rx, radius)
        dist = np.sqrt((yy - ly) ** 2 + (xx - lx) ** 2)
        prev_frac = 0.0
        for name, frac in spec.class_layering:
            ring = (dist > prev_frac * radius) & (dist <= frac * radius)
            class_map[ring] = CLASS_NAMES.index(name) + 1
            prev_frac = frac
        # innermost ring starts at the center
        class_map[dist <= spec.class_layering[0][1] * radius] = \
            CLASS_NAMES.index(spec.class_layering[0][0]) + 1

    for k, name in enumerate(CLASS_NAMES):
        sel = class_map == k + 1
        img[sel] = _TISSUE + _CLASS_CONTRAST[name] * spec.lesion_contrast

    if spec.noise > 0:
        texture = ndimage.gaussian_filter(rng.standard_normal((s, s)), sigma=2.0)
        img[inner] += spec.noise * texture[inner]

    img = np.clip(img, 0.0, 1.0)
    masks = np.stack([(class_map == k + 1) for k in range(len(CLASS_NAMES))]).astype(np.uint8)
    return ImageSlice.create(
        id=f"{spec.volume_id}_0",
        pixels=img,
        abnormal_masks=masks,
        meta={"spec_seed": spec.seed},
    )


def _sample_lesion_center(rng, cy, cx, ry, rx, radius):
    """Uniformly sample a center such that the whole lesion disk stays inside
    the brain ellipse (conservatively, inside the ellipse shrunk by radius)."""
    sy, sx = ry - _SKULL_WIDTH - radius, rx - _SKULL_WIDTH - radius
    if sy <= 0 or sx <= 0:
        raise ValueError(f"lesion radius {radius:.1f} cannot fit inside brain axes ({ry}, {rx})")
    for _ in range(1000):
        u, v = rng.uniform(-1, 1, size=2)
        if u * u + v * v <= 1.0:
            return cy + u * sy, cx + v * sx
    raise RuntimeError("lesion center sampling failed")  # pragma: no cover


# ---------------------------------------------------------------------------
# Dataset generation: discrete shape classes + lesion size buckets give the
# retrieval evaluation its ground truth.
# ---------------------------------------------------------------------------

#: (brain-axes fractions of size, ventricle scale) per shape class.
SHAPE_TEMPLATES = (
    ((0.38, 0.38), 1.0),   # round
    ((0.40, 0.29), 1.0),   # tall
    ((0.29, 0.40), 1.0),   # wide
    ((0.38, 0.38), 2.0),   # round, enlarged ventricles
)

LESION_BUCKETS = ("none", "small", "large")


@dataclass
class DatasetSpec:
    """Knobs for a reproducible phantom dataset."""

    count: int
    seed: int
    size: int = CANONICAL_SIZE
    normal_fraction: float = 0.3
    volume_prefix: str = "PH"
    lesion_contrast: float = 0.35
    extra: dict = field(default_factory=dict)


def make_phantom_dataset(spec: DatasetSpec) -> list:
    """Generate `count` phantom slices with per-slice shape/lesion ground truth."""
    rng = np.random.default_rng(spec.seed)
    slices = []
    for i in range(spec.count):
        shape_class = int(rng.integers(0, len(SHAPE_TEMPLATES)))
        (fy, fx), vent = SHAPE_TEMPLATES[shape_class]
        axes = (
            fy * spec.size + rng.uniform(-0.01, 0.01) * spec.size,
            fx * spec.size + rng.uniform(-0.01, 0.01) * spec.size,
        )
        vent = vent * rng.uniform(0.9, 1.1)

        u = rng.random()
        if u < spec.normal_fraction:
            bucket, count, radius_range = "none", 0, (1.0, 1.0)
        elif u < spec.normal_fraction + (1.0 - spec.normal_fraction) / 2.0:
            bucket = "small"
            count = int(rng.integers(1, 3))
            radius_range = (0.045 * spec.size, 0.07 * spec.size)
        else:
            bucket, count = "large", 1
            radius_range = (0.12 * spec.size, 0.16 * spec.size)

        phantom_spec = PhantomSpec(
            seed=int(rng.integers(0, 2**31)),
            size=spec.size,
            brain_axes=axes,
            ventricle_scale=vent,
            lesion_count=count,
            lesion_radius_range=radius_range,
            lesion_contrast=spec.lesion_contrast,
            volume_id=f"{spec.volume_prefix}{i:04d}",
        )
        slc = generate_phantom(phantom_spec)
        slc.meta.update({
            "shape_class": shape_class,
            "lesion_bucket": bucket,
        })
        slices.append(slc)
    return slices


def split_dataset(slices, seed, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Deterministic train/query/reference split by seeded shuffle."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(slices))
    n_train = int(round(fractions[0] * len(slices)))
    n_query = int(round(fractions[1] * len(slices)))
    picked = [slices[i] for i in order]
    return {
        "train": picked[:n_train],
        "query": picked[n_train:n_train + n_query],
        "reference": picked[n_train + n_query:],
    }
