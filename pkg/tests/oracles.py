"""Small loop-based references shared by several test modules."""

import numpy as np


def bilinear_loop(a, H, W):
    """Half-pixel bilinear resize with clamped edges, one output pixel at a time."""
    h, w = a.shape
    out = np.zeros((H, W))
    for i in range(H):
        sy = min(max((i + 0.5) * h / H - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(W):
            sx = min(max((j + 0.5) * w / W - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = a[y0, x0] * (1 - fx) + a[y0, x1] * fx
            bot = a[y1, x0] * (1 - fx) + a[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def pixel_iou(a, b):
    pa = {(x, y) for x in range(a[0], a[2]) for y in range(a[1], a[3])}
    pb = {(x, y) for x in range(b[0], b[2]) for y in range(b[1], b[3])}
    return len(pa & pb) / len(pa | pb)
