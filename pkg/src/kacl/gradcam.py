"""Grad-CAM heatmaps from the stage-4 activations, heatmap -> box, and box IoU."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from kacl.tensor import Tensor, grad


class BoundingBox(NamedTuple):
    """Pixel rectangle; x0, y0 inclusive, x1, y1 exclusive. x is the column axis."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def is_valid(self, width: int, height: int) -> bool:
        return 0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def to_list(self) -> list[int]:
        return [int(v) for v in self]


@dataclass
class Heatmap:
    values: np.ndarray
    source_class: int


def centered_box(width: int, height: int) -> BoundingBox:
    """Centered box covering a quarter of the image area."""
    bw, bh = max(1, width // 2), max(1, height // 2)
    x0, y0 = (width - bw) // 2, (height - bh) // 2
    return BoundingBox(x0, y0, x0 + bw, y0 + bh)


@lru_cache(maxsize=32)
def _bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    # half-pixel centers, edges clamped
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    m[np.arange(out_size), lo] += 1.0 - frac
    m[np.arange(out_size), hi] += frac
    m.flags.writeable = False
    return m


def upsample_bilinear(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """[..., h, w] -> [..., height, width]"""
    ry = _bilinear_matrix(height, maps.shape[-2])
    rx = _bilinear_matrix(width, maps.shape[-1])
    return np.einsum("yh,...hw,xw->...yx", ry, maps, rx)


def cams_from_graph(logits: Tensor, stage4: Tensor, classes, out_hw: tuple[int, int]) -> np.ndarray:
    """Heatmaps for every row of an already-recorded forward pass.

    ``classes[n]`` selects the class score differentiated for image n. Uses
    :func:`kacl.tensor.grad`, so no parameter ``.grad`` is modified.
    """
    classes = np.asarray(classes, dtype=int)
    n = logits.shape[0]
    if stage4.shape[0] != n or classes.shape != (n,):
        raise ValueError("one target class per image is required")
    if not stage4.requires_grad:
        raise ValueError("stage4 must be part of a recorded graph")
    seed = np.zeros(logits.shape)
    seed[np.arange(n), classes] = 1.0
    (g,) = grad(logits, [stage4], grad_output=seed)
    weights = g.mean(axis=(2, 3))
    raw = np.maximum(np.einsum("nc,nchw->nhw", weights, stage4.data), 0.0)
    up = upsample_bilinear(raw, *out_hw)
    peak = up.reshape(n, -1).max(axis=1)
    scale = np.where(peak > 0, peak, 1.0)
    return up / scale[:, None, None]


def gradcam_batch(encoder, head, images: np.ndarray, classes) -> np.ndarray:
    """images [N,H,W] or [N,1,H,W] -> heatmaps [N,H,W] in [0,1]."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    y, stage4 = encoder.forward(Tensor(x))
    logits = head.logits(y)
    return cams_from_graph(logits, stage4, classes, x.shape[-2:])


def gradcam(encoder, head, image: np.ndarray, target_class: int) -> Heatmap:
    n_classes = head.n_classes
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target_class {target_class} outside [0, {n_classes})")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    values = gradcam_batch(encoder, head, img[None], [target_class])[0]
    return Heatmap(values, int(target_class))


def threshold_to_bbox(heatmap, threshold: float = 0.5, fallback: BoundingBox | None = None) -> BoundingBox:
    """Tight box of the largest 4-connected component of ``heatmap > threshold``.

    Equal-area ties go to the component met first in row-major scan order.
    With no pixel above threshold, ``fallback`` (default: centered quarter box).
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    h, w = values.shape
    labels, n = ndimage.label(values > threshold)
    if n == 0:
        return fallback if fallback is not None else centered_box(w, h)
    areas = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(areas)) + 1
    ys, xs = np.nonzero(labels == best)
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0
