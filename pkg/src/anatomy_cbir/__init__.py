"""Decomposed anatomy coding and content-based image retrieval.

A dual-codebook encoder-decoder maps a 2D grayscale medical image onto two
discrete latent codes: one capturing the anatomy as it would appear without
disease, the other capturing lesion-specific content.  Retrieval ranks a
reference set by L2 distance over either code, their concatenation, or a
cross-image mixture of the two.
"""

__version__ = "0.1.0"

from anatomy_cbir.slices import ImageSlice, AbnormalityMask, build_abnormality_mask

__all__ = [
    "ImageSlice",
    "AbnormalityMask",
    "build_abnormality_mask",
    "__version__",
]
