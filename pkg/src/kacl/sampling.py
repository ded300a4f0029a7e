"""Positive/negative selection for the image-radiomics contrastive loss.

The positive view of a disease-positive image is its own radiomic vector.
Negatives are other images of the minibatch that are either normal or share
the anchor's body part with a different disease.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kacl.gradcam import BoundingBox
from kacl.radiomics import NormalizationStats, RadiomicsError, extract

log = logging.getLogger(__name__)

NORMAL = -1
DEFAULT_NORMAL_CAP = 8


@dataclass
class DiseaseHierarchy:
    body_parts: list[str]
    diseases: list[tuple[str, str]]
    normal: str = "Normal"

    def __post_init__(self):
        self.diseases = [tuple(d) for d in self.diseases]
        names = [d for d, _ in self.diseases]
        if len(set(names)) != len(names):
            raise ValueError("disease names must be unique")
        for name, part in self.diseases:
            if part not in self.body_parts:
                raise ValueError(f"disease {name!r} maps to unknown body part {part!r}")
        self._part_index = np.array([self.body_parts.index(p) for _, p in self.diseases], dtype=int)

    @property
    def n_diseases(self) -> int:
        return len(self.diseases)

    @property
    def n_nodes(self) -> int:
        return 1 + len(self.body_parts) + len(self.diseases)

    @property
    def disease_names(self) -> list[str]:
        return [d for d, _ in self.diseases]

    def part_of(self, disease: int) -> int:
        return int(self._part_index[disease])

    def index(self, name: str) -> int:
        if name == self.normal:
            return NORMAL
        return self.disease_names.index(name)

    def to_dict(self) -> dict:
        return {"body_parts": list(self.body_parts),
                "diseases": [{"name": n, "part": p} for n, p in self.diseases],
                "normal": self.normal}

    @classmethod
    def from_dict(cls, d: dict) -> "DiseaseHierarchy":
        return cls(list(d["body_parts"]), [(e["name"], e["part"]) for e in d["diseases"]], d.get("normal", "Normal"))

    @classmethod
    def load(cls, path) -> "DiseaseHierarchy":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def synthetic(cls) -> "DiseaseHierarchy":
        """Eight diseases over three body parts; matches the phantom generator's bands."""
        return cls(
            ["Lung", "Heart", "Pleura"],
            [("Atelectasis", "Lung"), ("Cardiomegaly", "Heart"), ("Effusion", "Pleura"),
             ("Infiltration", "Lung"), ("Mass", "Lung"), ("Nodule", "Lung"),
             ("Pneumonia", "Lung"), ("Pneumothorax", "Pleura")],
        )

    @classmethod
    def chest_21(cls) -> "DiseaseHierarchy":
        """21-node chest hierarchy: normal + 5 body parts + 15 findings."""
        return cls(
            ["Lung", "Pleura", "Heart", "Mediastinum", "Bone"],
            [("Atelectasis", "Lung"), ("Consolidation", "Lung"), ("Edema", "Lung"),
             ("Emphysema", "Lung"), ("Fibrosis", "Lung"), ("Infiltration", "Lung"),
             ("Mass", "Lung"), ("Nodule", "Lung"), ("Pneumonia", "Lung"),
             ("Effusion", "Pleura"), ("Pleural Thickening", "Pleura"), ("Pneumothorax", "Pleura"),
             ("Cardiomegaly", "Heart"), ("Hernia", "Mediastinum"), ("Bone Fractures", "Bone")],
        )


def _label(item) -> int:
    return int(item if isinstance(item, (int, np.integer)) else item.label)


def is_negative(anchor: int, other: int, h: DiseaseHierarchy) -> bool:
    """Normal, or same body part with a different disease."""
    if other == NORMAL:
        return True
    return other != anchor and h.part_of(other) == h.part_of(anchor)


def negative_candidates(anchor, batch: Sequence, h: DiseaseHierarchy, anchor_index: int | None = None,
                        normal_cap: int | None = None) -> list[int]:
    """Indices into ``batch`` that may serve as negatives for ``anchor``.

    ``anchor`` is a disease index (or an item with ``.label``); ``anchor_index``
    is excluded. At most ``normal_cap`` normal images are kept, first in batch order.
    """
    a = _label(anchor)
    if a == NORMAL:
        raise ValueError("normal images are never anchors")
    out = []
    normals = 0
    for k, item in enumerate(batch):
        if k == anchor_index:
            continue
        lab = _label(item)
        if not is_negative(a, lab, h):
            continue
        if lab == NORMAL:
            if normal_cap is not None and normals >= normal_cap:
                continue
            normals += 1
        out.append(k)
    return out


@dataclass
class ContrastivePair:
    anchor: int
    positive: np.ndarray
    negatives: list[int]
    box: BoundingBox
    ground_truth_box: bool = False


@dataclass
class PairBatch:
    pairs: list[ContrastivePair] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def anchors(self) -> np.ndarray:
        return np.array([p.anchor for p in self.pairs], dtype=int)

    @property
    def positives(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((0, 0))
        return np.stack([p.positive for p in self.pairs])

    def negative_mask(self, batch_size: int) -> np.ndarray:
        mask = np.zeros((len(self.pairs), batch_size))
        for a, p in enumerate(self.pairs):
            mask[a, p.negatives] = 1.0
        return mask


def build_pairs(batch: Sequence, byop_boxes, stats: NormalizationStats, h: DiseaseHierarchy,
                normal_cap: int = DEFAULT_NORMAL_CAP, n_levels: int = 8) -> PairBatch:
    """One pair per disease-positive image, in batch order.

    Items need ``pixels``, ``label``, ``annotated`` and ``gt_box``. Annotated
    images use their ground-truth box, the rest ``byop_boxes[k]``. An image
    whose radiomics cannot be extracted is skipped.
    """
    out = PairBatch()
    for k, item in enumerate(batch):
        if item.label == NORMAL:
            continue
        use_gt = bool(item.annotated and item.gt_box is not None)
        box = item.gt_box if use_gt else byop_boxes[k]
        try:
            vec = extract(item.pixels, box, stats, n_levels)
        except RadiomicsError as exc:
            log.info("skipping pair for batch item %d: %s", k, exc)
            out.skipped.append(k)
            continue
        negs = negative_candidates(item.label, batch, h, anchor_index=k, normal_cap=normal_cap)
        out.pairs.append(ContrastivePair(k, vec, negs, box, use_gt))
    return out
