"""Contrastive, focal and combined objectives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from kacl.tensor import Tensor, as_tensor, clip, concat, exp, log, power, sqrt, take


class NumericalError(ArithmeticError):
    pass


@dataclass
class LossConfig:
    tau: float = 0.5
    alpha: float = 0.25
    gamma: float = 2.0
    lam: float = 0.5
    literal_denominator: bool = False
    epsilon: float = 1e-12
    cam_threshold: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 < self.cam_threshold < 1.0:
            raise ValueError("cam_threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["cam-threshold"] = d.pop("cam_threshold")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        for key in ("cam-threshold", "cam_threshold"):
            if key in d:
                d["cam_threshold"] = d.pop(key)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _normalize_rows(z: Tensor, eps: float) -> Tensor:
    z = as_tensor(z)
    norm = sqrt((z * z).sum(axis=-1, keepdims=True) + eps * eps)
    return z / norm


def cosine_sim(u, v, eps: float = 1e-12) -> Tensor:
    """u.v / (|u||v|); a zero vector gives 0 instead of NaN."""
    return (_normalize_rows(u, eps) * _normalize_rows(v, eps)).sum(axis=-1)


def kacl_loss(z_all: Tensor, anchors, z_pos: Tensor, neg_mask, cfg: LossConfig) -> Tensor:
    """Mean contrastive loss over anchors.

    z_all: image projections of the whole batch [N, P]; ``anchors[a]`` is the
    row of anchor a; z_pos: radiomic projections of the anchors [A, P];
    neg_mask: [A, N] 0/1, hierarchy-valid negatives per anchor.
    """
    anchors = np.asarray(anchors, dtype=int)
    mask = np.asarray(neg_mask, dtype=np.float64)
    if anchors.size == 0:
        return Tensor(0.0)
    if cfg.literal_denominator:
        keep = mask.sum(axis=1) > 0
        if not keep.any():
            return Tensor(0.0)
        if not keep.all():
            rows = np.flatnonzero(keep)
            anchors, mask = anchors[rows], mask[rows]
            z_pos = take(z_pos, rows)
    eps, inv_t = cfg.epsilon, 1.0 / cfg.tau
    n_all = _normalize_rows(z_all, eps)
    n_anchor = take(n_all, anchors)
    n_pos = _normalize_rows(z_pos, eps)
    pos = (n_anchor * n_pos).sum(axis=1)
    sims = n_anchor @ n_all.T
    # every similarity is <= 1, so shifting by 1/tau keeps exp() <= 1
    neg = (exp((sims - 1.0) * inv_t) * mask).sum(axis=1)
    pos_shift = (pos - 1.0) * inv_t
    den = neg if cfg.literal_denominator else neg + exp(pos_shift)
    return (log(den) - pos_shift).mean()


def kacl_pair_loss(z_i, z_r, negatives, cfg: LossConfig) -> Tensor:
    """Single-anchor form: z_i, z_r are [P] vectors, negatives a list of [P] image projections."""
    rows = [as_tensor(z_i).reshape(1, -1)] + [as_tensor(n).reshape(1, -1) for n in negatives]
    z_all = concat(rows, axis=0)
    mask = np.zeros((1, len(rows)))
    mask[0, 1:] = 1.0
    return kacl_loss(z_all, [0], as_tensor(z_r).reshape(1, -1), mask, cfg)


def focal_loss(p, y, cfg: LossConfig) -> Tensor:
    """Mean over all (sample, class) cells of the two-sided focal loss."""
    p = clip(as_tensor(p), cfg.epsilon, 1.0 - cfg.epsilon)
    y = np.asarray(y, dtype=np.float64)
    a, g = cfg.alpha, cfg.gamma
    pos = power(1.0 - p, g) * log(p) * (-a)
    neg = power(p, g) * log(1.0 - p) * (-(1.0 - a))
    return (pos * y + neg * (1.0 - y)).mean()


def total_loss(l_cl, l_fl, cfg: LossConfig, lam: float | None = None) -> Tensor:
    lam = cfg.lam if lam is None else lam
    l_cl, l_fl = as_tensor(l_cl), as_tensor(l_fl)
    for name, t in (("contrastive", l_cl), ("focal", l_fl)):
        if not math.isfinite(float(t.data)):
            raise NumericalError(f"{name} loss is not finite: {float(t.data)}")
    return lam * l_cl + (1.0 - lam) * l_fl
