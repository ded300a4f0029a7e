import logging
from dataclasses import dataclass

import numpy as np
import pytest

from kacl.gradcam import BoundingBox
from kacl.radiomics import NormalizationStats, extract
from kacl.sampling import NORMAL, DiseaseHierarchy, build_pairs, is_negative, negative_candidates


@dataclass
class Item:
    label: int
    pixels: np.ndarray = None
    annotated: bool = False
    gt_box: BoundingBox = None


def test_chest_hierarchy_example():
    h = DiseaseHierarchy.chest_21()
    assert h.n_nodes == 21
    batch = [Item(h.index(n)) for n in ("Atelectasis", "Edema", "Normal", "Bone Fractures")]
    assert negative_candidates(h.index("Pneumonia"), batch, h) == [0, 1, 2]


def test_synthetic_hierarchy_parts():
    h = DiseaseHierarchy.synthetic()
    assert h.n_diseases == 8 and len(h.body_parts) == 3
    assert h.disease_names[h.index("Effusion")] == "Effusion"


def test_same_disease_batch_has_no_negatives():
    h = DiseaseHierarchy.synthetic()
    assert negative_candidates(2, [Item(2)] * 5, h) == []


def test_all_normal_batch_and_cap():
    h = DiseaseHierarchy.synthetic()
    assert negative_candidates(0, [Item(NORMAL)] * 5, h) == [0, 1, 2, 3, 4]
    assert negative_candidates(0, [Item(NORMAL)] * 12, h, normal_cap=8) == list(range(8))


def test_normal_anchor_rejected():
    with pytest.raises(ValueError):
        negative_candidates(NORMAL, [], DiseaseHierarchy.synthetic())


def test_hierarchy_validation():
    with pytest.raises(ValueError):
        DiseaseHierarchy(["Lung"], [("A", "Heart")])
    with pytest.raises(ValueError):
        DiseaseHierarchy(["Lung"], [("A", "Lung"), ("A", "Lung")])


def test_hierarchy_roundtrip(tmp_path):
    h = DiseaseHierarchy.chest_21()
    h.save(tmp_path / "h.json")
    assert DiseaseHierarchy.load(tmp_path / "h.json") == h


def test_random_batches_respect_rule():
    h = DiseaseHierarchy.synthetic()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        labels = rng.integers(-1, h.n_diseases, size=rng.integers(1, 20))
        batch = [Item(int(v)) for v in labels]
        for k, lab in enumerate(labels):
            if lab == NORMAL:
                continue
            negs = negative_candidates(int(lab), batch, h, anchor_index=k, normal_cap=4)
            assert k not in negs
            assert sum(labels[j] == NORMAL for j in negs) <= 4
            for j in negs:
                other = int(labels[j])
                assert other == NORMAL or (other != lab and h.part_of(other) == h.part_of(int(lab)))
            # nothing eligible is dropped apart from normals over the cap
            eligible = [j for j in range(len(labels)) if j != k and labels[j] != NORMAL
                        and is_negative(int(lab), int(labels[j]), h)]
            assert [j for j in negs if labels[j] != NORMAL] == eligible


def _image(seed):
    return np.random.default_rng(seed).uniform(size=(64, 64))


def test_build_pairs_counts_and_boxes():
    h = DiseaseHierarchy.synthetic()
    stats = NormalizationStats.identity()
    gt = BoundingBox(10, 10, 30, 30)
    cam = BoundingBox(0, 0, 20, 20)
    batch = [Item(0, _image(0), True, gt), Item(NORMAL, _image(1)), Item(3, _image(2)), Item(NORMAL, _image(3)),
             Item(6, _image(4)), Item(NORMAL, _image(5)), Item(NORMAL, _image(6)), Item(NORMAL, _image(7))]
    boxes = [cam] * len(batch)
    pb = build_pairs(batch, boxes, stats, h)
    assert list(pb.anchors) == [0, 2, 4]
    first = pb.pairs[0]
    assert first.box == gt and first.ground_truth_box
    np.testing.assert_array_equal(first.positive, extract(batch[0].pixels, gt, stats))
    assert pb.pairs[1].box == cam and not pb.pairs[1].ground_truth_box
    assert pb.negative_mask(len(batch)).shape == (3, 8)
    # deterministic
    again = build_pairs(batch, boxes, stats, h)
    assert np.array_equal(again.positives, pb.positives)


def test_all_normal_batch_gives_no_pairs():
    pb = build_pairs([Item(NORMAL, _image(0))] * 4, [None] * 4, NormalizationStats.identity(),
                     DiseaseHierarchy.synthetic())
    assert pb.pairs == [] and pb.positives.shape == (0, 0)


def test_failed_extraction_is_skipped(caplog):
    h = DiseaseHierarchy.synthetic()
    batch = [Item(0, _image(0)), Item(1, _image(1))]
    tiny = BoundingBox(0, 0, 1, 1)
    with caplog.at_level(logging.INFO, logger="kacl.sampling"):
        pb = build_pairs(batch, [tiny, BoundingBox(5, 5, 25, 25)], NormalizationStats.identity(), h)
    assert pb.skipped == [0] and list(pb.anchors) == [1]
    assert "skipping" in caplog.text
