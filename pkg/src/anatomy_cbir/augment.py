"""Seeded geometric augmentation applied identically to pixels and masks.

Transforms: horizontal flip (p=0.5), rotation in [-15, +15] degrees, and
scaling in [0.9, 1.1], all about the image center.  The flip is an exact
index reversal; rotation/scale share one affine resample (bilinear for
pixels, nearest for the label map so class disjointness survives).  Output
keeps the input canvas size: upscaling crops, downscaling zero-pads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from anatomy_cbir.slices import CLASS_NAMES, ImageSlice

SCALE_RANGE = (0.9, 1.1)
ROTATION_RANGE_DEG = (-15.0, 15.0)
FLIP_PROBABILITY = 0.5


@dataclass
class AugmentParams:
    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0


def draw_augment_params(seed: int) -> AugmentParams:
    rng = np.random.default_rng(seed)
    return AugmentParams(
        flip=bool(rng.random() < FLIP_PROBABILITY),
        angle_deg=float(rng.uniform(*ROTATION_RANGE_DEG)),
        scale=float(rng.uniform(*SCALE_RANGE)),
    )


def apply_augmentation(slc: ImageSlice, params: AugmentParams) -> ImageSlice:
    """Apply one geometric transform to pixels and all masks together."""
    pixels = slc.pixels.astype(np.float64)
    # single integer label map keeps classes disjoint under resampling
    label_map = np.zeros(pixels.shape, dtype=np.int8)
    for k in range(len(CLASS_NAMES)):
        label_map[slc.abnormal_masks[k] > 0] = k + 1

    if params.flip:
        pixels = pixels[:, ::-1].copy()
        label_map = label_map[:, ::-1].copy()

    if params.angle_deg != 0.0 or params.scale != 1.0:
        theta = np.deg2rad(params.angle_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        # output -> input mapping for ndimage.affine_transform
        matrix = np.linalg.inv(rot @ np.diag([params.scale, params.scale]))
        center = (np.asarray(pixels.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - matrix @ center
        pixels = ndimage.affine_transform(pixels, matrix, offset=offset, order=1,
                                          mode="constant", cval=0.0)
        label_map = ndimage.affine_transform(label_map, matrix, offset=offset, order=0,
                                             mode="constant", cval=0)

    masks = np.stack([(label_map == k + 1) for k in range(len(CLASS_NAMES))])
    return ImageSlice.create(
        id=slc.id,
        pixels=np.clip(pixels, 0.0, 1.0),
        abnormal_masks=masks,
        meta=dict(slc.meta),
    )


def augment(slc: ImageSlice, seed: int) -> ImageSlice:
    """Randomly augment a slice; the same seed always yields the same output."""
    return apply_augmentation(slc, draw_augment_params(seed))
