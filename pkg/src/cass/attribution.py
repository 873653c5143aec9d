"""Integrated Gradients over input pixels, heatmap overlays and raw map files."""
import logging
import struct
from dataclasses import dataclass

import numpy as np

from cass.imageio import write_png
from cass.tensor import DimensionError

log = logging.getLogger(__name__)

RAW_MAGIC = b"CASSIG1\0"


@dataclass
class AttributionMap:
    values: np.ndarray  # (H, W) signed
    target_class: int
    baseline: str
    steps: int
    completeness_gap: float
    logit_delta: float  # F(x) - F(baseline)

    @property
    def relative_gap(self):
        return self.completeness_gap / abs(self.logit_delta) if self.logit_delta else 0.0


def _as_batch(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise DimensionError(f"expected (H, W) or (C, H, W), got {img.shape}")
    return img


def integrated_gradients(model, image, target, baseline=None, steps=50, batch_size=64):
    """Right-Riemann Integrated Gradients of the ``target`` logit.

    ``model`` needs ``forward(x, train=False)`` returning logits and
    ``backward(dlogits)`` returning the input gradient.  The baseline
    defaults to a black image.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = _as_batch(getattr(image, "pixels", image))
    if baseline is None:
        base, desc = np.zeros_like(x), "zeros"
    else:
        base, desc = _as_batch(getattr(baseline, "pixels", baseline)), "image"
    if base.shape != x.shape:
        raise DimensionError(f"baseline shape {base.shape} != image shape {x.shape}")
    dtype = getattr(model, "dtype", np.float64)
    delta = x - base
    alphas = np.arange(1, steps + 1) / steps
    total = np.zeros_like(x)
    for i in range(0, steps, batch_size):
        a = alphas[i:i + batch_size, None, None, None]
        path = (base[None] + a * delta[None]).astype(dtype)
        logits = model.forward(path, train=False)
        dlogits = np.zeros_like(logits)
        dlogits[:, target] = 1
        total += np.asarray(model.backward(dlogits), dtype=np.float64).sum(axis=0)
    if hasattr(model, "zero_grad"):
        model.zero_grad()
    ig = delta * total / steps
    ends = model.forward(np.stack([x, base]).astype(dtype), train=False)[:, target]
    logit_delta = float(ends[0]) - float(ends[1])
    gap = abs(float(ig.sum()) - logit_delta)
    return AttributionMap(ig.sum(axis=0), int(target), desc, steps, gap, logit_delta)


def normalise(values, percentile=99.0):
    """|values| scaled by their percentile, clipped to [0, 1]."""
    a = np.abs(values)
    ref = np.percentile(a, percentile)
    if ref == 0:
        ref = a.max()
    if ref == 0:
        return np.zeros_like(a)
    return np.clip(a / ref, 0, 1)


def render_heatmap(amap, underlay, path=None, hue=(255, 0, 0)):
    """Red overlay on a grayscale underlay; returns the (H, W, 3) uint8 image.

    Each pixel blends towards ``hue`` with weight 0.5 * importance.
    """
    values = getattr(amap, "values", amap)
    under = np.asarray(getattr(underlay, "pixels", underlay), dtype=np.float64)
    if under.shape != values.shape:
        raise DimensionError(f"map shape {values.shape} != underlay shape {under.shape}")
    gray = np.repeat((np.clip(under, 0, 1) * 255)[..., None], 3, axis=2)
    if not np.any(values):
        log.warning("all-zero attribution map; writing the plain underlay")
        weight = np.zeros(values.shape)
    else:
        weight = 0.5 * normalise(values)
    rgb = gray * (1 - weight[..., None]) + np.asarray(hue, float) * weight[..., None]
    out = np.round(rgb).astype(np.uint8)
    if path is not None:
        write_png(path, out)
    return out


def write_raw_map(path, values):
    values = np.asarray(values)
    h, w = values.shape
    with open(path, "wb") as f:
        f.write(RAW_MAGIC + struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_raw_map(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != RAW_MAGIC or len(blob) < 16:
        raise ValueError(f"{path}: not a raw attribution map")
    h, w = struct.unpack_from("<II", blob, 8)
    if len(blob) != 16 + 4 * h * w:
        raise ValueError(f"{path}: expected {h}x{w} values")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).copy()
