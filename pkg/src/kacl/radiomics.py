"""33-feature radiomic vector for a rectangular ROI.

First-order statistics, rectangle shape descriptors and five gray-level
texture families (GLCM, GLRLM, GLSZM, NGTDM, GLDM), computed on an ROI
quantized to ``G`` equal-width levels over its own intensity range.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from kacl.gradcam import BoundingBox

DEFAULT_LEVELS = 8
CLAMP = 6.0
COARSENESS_CAP = 1e6
# correlation of a GLCM whose marginal variance is below this is defined as 1
_FLAT_VARIANCE = 1e-12

FIRST_ORDER = ("mean", "median", "min", "max", "range", "variance", "skewness", "kurtosis", "energy", "entropy")
SHAPE = ("pixel_surface", "perimeter", "aspect_ratio", "relative_area")
GLCM = ("contrast", "correlation", "joint_energy", "homogeneity", "entropy", "dissimilarity")
GLRLM = ("short_run_emphasis", "long_run_emphasis", "gray_level_nonuniformity", "run_percentage")
GLSZM = ("small_area_emphasis", "large_area_emphasis", "zone_percentage")
NGTDM = ("coarseness", "contrast", "busyness")
GLDM = ("small_dependence_emphasis", "large_dependence_emphasis", "dependence_nonuniformity")

FAMILIES = {
    "firstorder": FIRST_ORDER, "shape": SHAPE, "glcm": GLCM, "glrlm": GLRLM,
    "glszm": GLSZM, "ngtdm": NGTDM, "gldm": GLDM,
}
FEATURE_NAMES: tuple[str, ...] = tuple(f"{fam}_{name}" for fam, names in FAMILIES.items() for name in names)
N_FEATURES = len(FEATURE_NAMES)
REGISTRY_VERSION = 1
REGISTRY_HASH = hashlib.sha256(
    (f"v{REGISTRY_VERSION}\n" + "\n".join(FEATURE_NAMES)).encode()
).hexdigest()[:16]

# (dy, dx): 0, 45, 90, 135 degrees at distance 1
DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


class RadiomicsError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedROI:
    levels: np.ndarray
    n_levels: int

    @property
    def height(self) -> int:
        return self.levels.shape[0]

    @property
    def width(self) -> int:
        return self.levels.shape[1]


def quantize_values(values: np.ndarray, n_levels: int) -> np.ndarray:
    """Equal-width binning over the values' own [min, max] into 1..n_levels."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.ones(values.shape, dtype=np.int64)
    q = np.floor((values - lo) / (hi - lo) * n_levels).astype(np.int64) + 1
    return np.clip(q, 1, n_levels)


def crop(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    h, w = image.shape
    if not box.is_valid(w, h):
        raise RadiomicsError(f"box {tuple(box)} is empty or outside a {w}x{h} image")
    return image[box.y0:box.y1, box.x0:box.x1]


def quantize(image: np.ndarray, box: BoundingBox, n_levels: int = DEFAULT_LEVELS) -> QuantizedROI:
    if n_levels < 2:
        raise RadiomicsError("need at least 2 gray levels")
    return QuantizedROI(quantize_values(crop(np.asarray(image, dtype=np.float64), box), n_levels), n_levels)


# first order / shape ------------------------------------------------------

def first_order(pixels, n_levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """mean, median, min, max, range, variance, skewness, kurtosis, energy, entropy.

    Variance is the population variance, kurtosis is not excess-corrected,
    entropy is in bits over the ``n_levels``-bin histogram. A ROI with
    max == min has skewness = kurtosis = 0.
    """
    x = np.asarray(pixels, dtype=np.float64).ravel()
    if x.size == 0:
        raise RadiomicsError("first-order features need at least one pixel")
    mean = x.mean()
    lo, hi = x.min(), x.max()
    dev = x - mean
    m2 = np.mean(dev ** 2)
    if hi == lo:
        skew = kurt = 0.0
    else:
        skew = np.mean(dev ** 3) / m2 ** 1.5
        kurt = np.mean(dev ** 4) / m2 ** 2
    counts = np.bincount(quantize_values(x, n_levels))
    p = counts[counts > 0] / x.size
    entropy = float(-np.sum(p * np.log2(p)))
    return np.array([mean, np.median(x), lo, hi, hi - lo, m2, skew, kurt, np.sum(x * x), entropy])


def shape_features(box: BoundingBox, image_dims: tuple[int, int]) -> np.ndarray:
    """pixel_surface, perimeter, aspect_ratio, relative_area. image_dims is (width, height)."""
    w, h = box.width, box.height
    if w <= 0 or h <= 0:
        raise RadiomicsError("empty box")
    big_w, big_h = image_dims
    return np.array([w * h, 2.0 * (w + h), max(w, h) / min(w, h), w * h / (big_w * big_h)], dtype=np.float64)


# texture matrices ---------------------------------------------------------

@lru_cache(maxsize=512)
def _line_order(h: int, w: int, dy: int, dx: int):
    """Pixel order walking every line of direction (dy, dx), plus the line id of each step."""
    ys, xs = np.mgrid[0:h, 0:w]
    ys, xs = ys.ravel(), xs.ravel()
    if (dy, dx) == (0, 1):
        line, pos = ys, xs
    elif (dy, dx) == (1, 0):
        line, pos = xs, ys
    elif (dy, dx) == (1, 1):
        line, pos = xs - ys, ys
    elif (dy, dx) == (1, -1):
        line, pos = xs + ys, ys
    else:
        raise ValueError(f"unsupported direction {(dy, dx)}")
    order = np.lexsort((pos, line))
    flat = ys[order] * w + xs[order]
    lines = line[order]
    flat.flags.writeable = False
    lines.flags.writeable = False
    return flat, lines


def _check_size(roi: QuantizedROI, kind: str):
    if kind in ("glcm", "ngtdm", "gldm") and (roi.height < 2 or roi.width < 2):
        raise RadiomicsError(f"{kind.upper()} needs an ROI of at least 2x2, got {roi.width}x{roi.height}")


def glcm_matrix(roi: QuantizedROI, directions=DIRECTIONS) -> np.ndarray:
    """Symmetric co-occurrence probabilities, normalized per direction then averaged."""
    g = roi.n_levels
    lv = roi.levels.ravel()
    acc = np.zeros((g, g))
    used = 0
    for dy, dx in directions:
        flat, lines = _line_order(roi.height, roi.width, dy, dx)
        seq = lv[flat]
        same = lines[1:] == lines[:-1]
        a, b = seq[:-1][same] - 1, seq[1:][same] - 1
        if a.size == 0:
            continue
        c = np.bincount(a * g + b, minlength=g * g).reshape(g, g).astype(np.float64)
        c = c + c.T
        acc += c / c.sum()
        used += 1
    if used == 0:
        raise RadiomicsError("no co-occurring pixel pairs in ROI")
    return acc / used


def glrlm_matrix(roi: QuantizedROI, directions=DIRECTIONS) -> np.ndarray:
    """Run counts [level-1, length-1], summed over directions."""
    g = roi.n_levels
    max_len = max(roi.height, roi.width)
    lv = roi.levels.ravel()
    out = np.zeros((g, max_len))
    for dy, dx in directions:
        flat, lines = _line_order(roi.height, roi.width, dy, dx)
        seq = lv[flat]
        brk = np.flatnonzero((seq[1:] != seq[:-1]) | (lines[1:] != lines[:-1])) + 1
        starts = np.concatenate(([0], brk))
        lengths = np.diff(np.concatenate((starts, [seq.size])))
        np.add.at(out, (seq[starts] - 1, lengths - 1), 1.0)
    return out


_EIGHT = np.ones((3, 3), dtype=int)


def glszm_matrix(roi: QuantizedROI) -> np.ndarray:
    """Zone counts [level-1, size-1] over 8-connected zones."""
    g = roi.n_levels
    n = roi.levels.size
    out = np.zeros((g, n))
    for lvl in np.unique(roi.levels):
        labels, nz = ndimage.label(roi.levels == lvl, structure=_EIGHT)
        sizes = np.bincount(labels.ravel())[1:]
        np.add.at(out[lvl - 1], sizes - 1, 1.0)
    return out


_OFFSETS8 = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


def _neighbor_stats(levels: np.ndarray):
    """Per pixel: sum of in-ROI 8-neighbor levels, number of such neighbors, number equal to the pixel."""
    h, w = levels.shape
    lv = np.pad(levels.astype(np.float64), 1)
    inside = np.pad(np.ones((h, w)), 1)
    total = np.zeros((h, w))
    count = np.zeros((h, w))
    equal = np.zeros((h, w))
    for dy, dx in _OFFSETS8:
        nb = lv[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        ok = inside[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        total += nb * ok
        count += ok
        equal += (nb == levels) * ok
    return total, count, equal


def ngtdm_matrix(roi: QuantizedROI) -> np.ndarray:
    """Columns (s_i, n_i) per level: summed |level - neighborhood mean| and pixel count."""
    g = roi.n_levels
    total, count, _ = _neighbor_stats(roi.levels)
    valid = count > 0
    lv = roi.levels[valid]
    diff = np.abs(lv - total[valid] / count[valid])
    s = np.bincount(lv - 1, weights=diff, minlength=g)
    n = np.bincount(lv - 1, minlength=g).astype(np.float64)
    return np.stack([s, n], axis=1)


def gldm_matrix(roi: QuantizedROI) -> np.ndarray:
    """Counts [level-1, dependence-1]; dependence = 1 + #equal in-ROI 8-neighbors."""
    g = roi.n_levels
    _, _, equal = _neighbor_stats(roi.levels)
    out = np.zeros((g, 9))
    np.add.at(out, (roi.levels.ravel() - 1, equal.astype(np.int64).ravel()), 1.0)
    return out


_MATRIX = {"glcm": glcm_matrix, "glrlm": glrlm_matrix, "glszm": glszm_matrix,
           "ngtdm": ngtdm_matrix, "gldm": gldm_matrix}


def texture_matrix(roi: QuantizedROI, kind: str, **params) -> np.ndarray:
    kind = kind.lower()
    if kind not in _MATRIX:
        raise ValueError(f"unknown texture family {kind!r}")
    _check_size(roi, kind)
    return _MATRIX[kind](roi, **params)


# texture features ---------------------------------------------------------

def _glcm_features(p: np.ndarray) -> np.ndarray:
    g = p.shape[0]
    i, j = np.meshgrid(np.arange(1, g + 1), np.arange(1, g + 1), indexing="ij")
    diff = np.abs(i - j)
    mu_i, mu_j = np.sum(i * p), np.sum(j * p)
    var_i, var_j = np.sum((i - mu_i) ** 2 * p), np.sum((j - mu_j) ** 2 * p)
    if var_i < _FLAT_VARIANCE or var_j < _FLAT_VARIANCE:
        corr = 1.0
    else:
        corr = np.sum((i - mu_i) * (j - mu_j) * p) / np.sqrt(var_i * var_j)
    nz = p[p > 0]
    return np.array([
        np.sum(diff ** 2 * p), corr, np.sum(p * p), np.sum(p / (1.0 + diff)),
        -np.sum(nz * np.log2(nz)), np.sum(diff * p),
    ])


def _emphasis(p: np.ndarray):
    j = np.arange(1, p.shape[1] + 1, dtype=np.float64)
    total = p.sum()
    return total, np.sum(p / j ** 2) / total, np.sum(p * j ** 2) / total, j


def _glrlm_features(p: np.ndarray, n_directions: int = len(DIRECTIONS)) -> np.ndarray:
    nr, sre, lre, j = _emphasis(p)
    n_pixels = np.sum(p * j) / n_directions
    gln = np.sum(p.sum(axis=1) ** 2) / nr
    return np.array([sre, lre, gln, nr / n_pixels])


def _glszm_features(p: np.ndarray) -> np.ndarray:
    nz, sae, lae, j = _emphasis(p)
    return np.array([sae, lae, nz / np.sum(p * j)])


def _ngtdm_features(m: np.ndarray) -> np.ndarray:
    s, n = m[:, 0], m[:, 1]
    nvp = n.sum()
    prob = n / nvp
    levels = np.arange(1, m.shape[0] + 1, dtype=np.float64)
    present = prob > 0
    ps = np.sum(prob * s)
    coarseness = COARSENESS_CAP if ps == 0 else min(1.0 / ps, COARSENESS_CAP)
    ngp = int(present.sum())
    pi, li = prob[present], levels[present]
    if ngp <= 1:
        contrast = 0.0
    else:
        pair = np.sum(pi[:, None] * pi[None, :] * (li[:, None] - li[None, :]) ** 2)
        contrast = pair / (ngp * (ngp - 1)) * s.sum() / nvp
    denom = np.sum(np.abs((li * pi)[:, None] - (li * pi)[None, :]))
    busyness = 0.0 if denom == 0 else ps / denom
    return np.array([coarseness, contrast, busyness])


def _gldm_features(p: np.ndarray) -> np.ndarray:
    nz, sde, lde, _ = _emphasis(p)
    dn = np.sum(p.sum(axis=0) ** 2) / nz
    return np.array([sde, lde, dn])


_FEATURES = {"glcm": _glcm_features, "glrlm": _glrlm_features, "glszm": _glszm_features,
             "ngtdm": _ngtdm_features, "gldm": _gldm_features}


def texture_features(matrix: np.ndarray, kind: str) -> dict[str, float]:
    kind = kind.lower()
    values = _FEATURES[kind](np.asarray(matrix, dtype=np.float64))
    return {name: float(v) for name, v in zip(FAMILIES[kind], values)}


# full vector --------------------------------------------------------------

def raw_features(image: np.ndarray, box: BoundingBox, n_levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Unnormalized 33-vector in registry order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    roi = quantize(image, box, n_levels)
    for kind in ("glcm", "ngtdm", "gldm"):
        _check_size(roi, kind)
    parts = [first_order(crop(image, box), n_levels),
             shape_features(box, (image.shape[1], image.shape[0]))]
    for kind in ("glcm", "glrlm", "glszm", "ngtdm", "gldm"):
        parts.append(_FEATURES[kind](_MATRIX[kind](roi)))
    vec = np.concatenate(parts)
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise RadiomicsError(f"non-finite radiomic feature {FEATURE_NAMES[bad[0]]}")
    return vec


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, vectors) -> "NormalizationStats":
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != N_FEATURES or v.shape[0] == 0:
            raise RadiomicsError(f"need a non-empty [n, {N_FEATURES}] array of raw vectors")
        std = v.std(axis=0)
        return cls(v.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES))

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return np.clip((raw - self.mean) / self.std, -CLAMP, CLAMP)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "registry": REGISTRY_HASH}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        if d.get("registry", REGISTRY_HASH) != REGISTRY_HASH:
            raise RadiomicsError("normalization stats were computed for a different feature registry")
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def extract(image: np.ndarray, box: BoundingBox, stats: NormalizationStats,
            n_levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Z-scored (and clamped to +-6) radiomic vector of ``box`` in ``image``."""
    return stats.apply(raw_features(image, box, n_levels))
