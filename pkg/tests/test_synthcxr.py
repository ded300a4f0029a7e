import json
import shutil

import numpy as np
import pytest

from kacl.gradcam import BoundingBox
from kacl.radiomics import raw_features
from kacl.sampling import NORMAL, DiseaseHierarchy
from kacl.synthcxr import (PGM_MAX, SPLITS, ChecksumError, DataError, DatasetSpec, LabeledImage, MissingFileError,
                           assign_labels, generate, load, parse_pgm, render, write_pgm)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    spec = DatasetSpec(n_images=80, annotated_fraction=0.1, seed=7)
    root = tmp_path_factory.mktemp("ds")
    return generate(spec, root), root


def test_seed_determinism(small, tmp_path):
    ds, root = small
    generate(ds.spec, tmp_path)
    assert (tmp_path / "manifest.json").read_bytes() == (root / "manifest.json").read_bytes()
    for e in ds.entries:
        assert (tmp_path / e["file"]).read_bytes() == (root / e["file"]).read_bytes()


def test_threaded_generation_identical(small, tmp_path):
    ds, root = small
    generate(ds.spec, tmp_path, threads=3)
    assert (tmp_path / "manifest.json").read_bytes() == (root / "manifest.json").read_bytes()


def test_normal_count_from_ratio():
    assert DatasetSpec(n_images=1000).n_normal == 773


def test_class_frequencies_at_scale():
    spec = DatasetSpec(n_images=2000)
    labels, _, _ = assign_labels(spec)
    diseased = labels[labels != NORMAL]
    for k, f in enumerate(spec.disease_frequencies):
        assert abs(np.mean(diseased == k) - f) <= 0.02
    assert abs(np.sum(labels == NORMAL) / 2000 - 3.4 / 4.4) <= 0.02


def test_box_contains_lesion_peak():
    spec = DatasetSpec(seed=1)
    h = DiseaseHierarchy.synthetic()
    for i in range(80):
        label = i % 8
        _, lesion, box = render(spec, i, label, h.part_of(label), h)
        y, x = np.unravel_index(np.argmax(np.abs(lesion)), lesion.shape)
        assert box.x0 <= x < box.x1 and box.y0 <= y < box.y1
        assert np.all(lesion[:box.y0] == 0) and np.all(lesion[box.y1:] == 0)
        assert np.all(lesion[:, :box.x0] == 0) and np.all(lesion[:, box.x1:] == 0)


def test_lesions_radiomically_separable():
    """Nearest-centroid on ground-truth-box radiomics, fit on half of 500 images."""
    spec = DatasetSpec(seed=3)
    h = DiseaseHierarchy.synthetic()
    feats, labels = [], []
    for i in range(500):
        label = i % 8
        q, _, box = render(spec, i, label, h.part_of(label), h)
        feats.append(raw_features(q / PGM_MAX, box))
        labels.append(label)
    x, y = np.array(feats), np.array(labels)
    fit = (np.arange(500) // 8) % 2 == 0
    sd = x[fit].std(axis=0)
    z = (x - x[fit].mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    centroids = np.stack([z[fit & (y == k)].mean(axis=0) for k in range(8)])
    pred = np.argmin(((z[~fit][:, None] - centroids[None]) ** 2).sum(axis=-1), axis=1)
    assert np.mean(pred == y[~fit]) > 0.8


def test_roundtrip_pixel_identical(small):
    ds, root = small
    spec = ds.spec
    for img in ds.iter_images():
        q, _, box = render(spec, img.id, img.label, img.body_part, ds.hierarchy)
        assert np.array_equal(img.pixels, q / PGM_MAX)
        assert img.gt_box == box
        assert img.pixels.min() >= 0 and img.pixels.max() <= 1


def test_splits_partition_ids(small):
    ds, _ = small
    all_ids = [i for name in SPLITS for i in ds.splits[name]]
    assert sorted(all_ids) == list(range(ds.spec.n_images))
    assert len(set(all_ids)) == len(all_ids)
    for img in ds.images("annotated_train") + ds.images("annotated_test"):
        assert img.annotated and img.gt_box is not None and img.label != NORMAL
    for name in ("train", "val", "test"):
        assert not any(img.annotated for img in ds.images(name))


def test_image_invariants():
    with pytest.raises(ValueError):
        LabeledImage(0, np.zeros((4, 4)), 0, 0, None, annotated=True)
    with pytest.raises(ValueError):
        LabeledImage(0, np.zeros((4, 4)), NORMAL, 0, BoundingBox(0, 0, 2, 2))
    np.testing.assert_array_equal(LabeledImage(0, np.zeros((4, 4)), 2, 0).target(4), [0, 0, 1, 0])


def _copy(root, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(root, dst)
    return dst


def test_checksum_mismatch_refuses_load(small, tmp_path):
    ds, root = small
    dst = _copy(root, tmp_path)
    f = dst / ds.entries[-1]["file"]
    blob = bytearray(f.read_bytes())
    blob[-1] ^= 1
    f.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load(dst / "manifest.json")


def test_missing_file_named(small, tmp_path):
    ds, root = small
    dst = _copy(root, tmp_path)
    (dst / ds.entries[3]["file"]).unlink()
    with pytest.raises(MissingFileError, match=ds.entries[3]["file"]):
        load(dst)


def test_overlapping_splits_rejected(small, tmp_path):
    ds, root = small
    dst = _copy(root, tmp_path)
    m = json.loads((dst / "manifest.json").read_text())
    m["splits"]["val"].append(m["splits"]["train"][0])
    (dst / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DataError):
        load(dst)


def test_pgm_roundtrip(tmp_path):
    q = np.random.default_rng(0).integers(0, PGM_MAX + 1, size=(5, 7)).astype(np.uint16)
    blob = write_pgm(tmp_path / "a.pgm", q)
    assert blob.startswith(b"P5\n7 5\n65535\n")
    np.testing.assert_array_equal(parse_pgm(blob), q / PGM_MAX)
    with pytest.raises(DataError):
        parse_pgm(blob[:-1])


@pytest.mark.parametrize("kw", [{"n_images": 0}, {"annotated_fraction": 1.5}, {"size": 8},
                                {"unannotated_split": (0.5, 0.1, 0.1)}, {"annotated_fraction": 0.9}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        DatasetSpec(**kw)


def test_spec_roundtrip():
    spec = DatasetSpec(n_images=50, seed=4)
    assert DatasetSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        DatasetSpec.from_dict({"images": 3})
