"""Burned-in text removal for MPR images.

Text is drawn at the highest intensity in the image.  Pixels at or above a
threshold are grouped into 8-connected components; components of one pixel
are treated as noise.  Masked pixels are then filled, ring by ring from the
mask boundary, with the mean of their already-known 8-neighbours.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)
MAX_VIEWS = 50


class InpaintError(ValueError):
    """The mask leaves no pixel to take values from."""


@dataclass
class RawMprImage:
    pixels: np.ndarray  # (H, W) uint8
    view_index: int = 0
    branch_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        if not 0 <= self.view_index < MAX_VIEWS:
            raise ValueError(f"view_index {self.view_index} outside [0, {MAX_VIEWS})")


@dataclass
class CleanImage:
    pixels: np.ndarray  # (H, W) float in [0, 1]
    view_index: int = 0
    branch_id: str = ""
    patient_id: str = ""


def _pixels(img):
    return img.pixels if isinstance(img, RawMprImage) else np.asarray(img)


def detect_text_mask(img, threshold_quantile=0.999, min_level=255, min_size=2):
    """Boolean mask of bright connected components.

    The threshold is the ``threshold_quantile`` intensity, but never below
    ``min_level``: text is burned in at saturation, so an image without
    saturated pixels yields an empty mask.
    """
    px = _pixels(img)
    if px.max() == px.min():
        return np.zeros(px.shape, dtype=bool)
    thr = max(np.quantile(px, threshold_quantile), min_level)
    bright = px >= thr
    labels, n = ndimage.label(bright, structure=EIGHT)
    if n == 0:
        return bright
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def inpaint_neighbors(img, mask):
    """Fill masked pixels from their unmasked neighbours; returns values in [0, 1].

    Unmasked pixels are not modified.  Each pass fills every masked pixel
    that touches a known pixel, then marks that ring as known.
    """
    px = _pixels(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != px.shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {px.shape}")
    out = px.astype(np.float64)
    if mask.all():
        raise InpaintError("mask covers the whole image; nothing to average from")
    known = ~mask
    while not known.all():
        vals = ndimage.convolve(np.where(known, out, 0.0), EIGHT.astype(float),
                                mode="constant") - np.where(known, out, 0.0)
        counts = ndimage.convolve(known.astype(float), EIGHT.astype(float),
                                  mode="constant") - known
        ring = ~known & (counts > 0)
        out[ring] = vals[ring] / counts[ring]
        known = known | ring
    clean = out / 255.0
    if isinstance(img, RawMprImage):
        return CleanImage(clean, img.view_index, img.branch_id, img.patient_id)
    return CleanImage(clean)


def preprocess(img, clean=True):
    """Text removal followed by scaling to [0, 1]."""
    px = _pixels(img)
    mask = detect_text_mask(px) if clean else np.zeros(px.shape, dtype=bool)
    if not mask.any():
        out = CleanImage(px / 255.0)
    else:
        out = inpaint_neighbors(px, mask)
    if isinstance(img, RawMprImage):
        out.view_index, out.branch_id, out.patient_id = img.view_index, img.branch_id, img.patient_id
    return out


def requantize(clean):
    px = clean.pixels if isinstance(clean, CleanImage) else clean
    return np.clip(np.round(px * 255), 0, 255).astype(np.uint8)
