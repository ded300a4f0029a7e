import numpy as np
import pytest
from scipy import ndimage

from kacl.gradcam import (BoundingBox, Heatmap, cams_from_graph, centered_box, gradcam, iou, threshold_to_bbox,
                          upsample_bilinear)
from kacl.models import KACLModel
from kacl.tensor import Tensor, backward, matmul, tmean
from oracles import bilinear_loop, pixel_iou


def test_upsample_matches_loop():
    a = np.random.default_rng(0).normal(size=(8, 8))
    np.testing.assert_allclose(upsample_bilinear(a, 64, 64), bilinear_loop(a, 64, 64), atol=1e-12)


def test_analytic_channel_zero_score():
    rng = np.random.default_rng(1)
    acts = rng.normal(size=(2, 5, 8, 8))
    stage4 = Tensor(acts, requires_grad=True)
    select = np.zeros((5, 1))
    select[0, 0] = 1.0
    logits = matmul(tmean(stage4, axis=(2, 3)), Tensor(select))
    cams = cams_from_graph(logits, stage4, [0, 0], (64, 64))
    for n in range(2):
        up = bilinear_loop(np.maximum(acts[n, 0] / 64.0, 0.0), 64, 64)
        expected = up / up.max()
        assert np.max(np.abs(cams[n] - expected)) < 1e-6


def test_negative_weights_give_zero_map():
    acts = np.abs(np.random.default_rng(2).normal(size=(1, 3, 8, 8)))
    stage4 = Tensor(acts, requires_grad=True)
    logits = matmul(tmean(stage4, axis=(2, 3)), Tensor(-np.ones((3, 1))))
    cam = cams_from_graph(logits, stage4, [0], (64, 64))[0]
    assert np.all(cam == 0.0)


def test_heatmap_range_and_peak():
    m = KACLModel(seed=0)
    img = np.random.default_rng(3).uniform(size=(64, 64))
    for k in range(m.head.n_classes):
        h = gradcam(m.encoder, m.head, img, k)
        assert isinstance(h, Heatmap) and h.source_class == k
        assert h.values.shape == (64, 64) and h.values.min() >= 0.0
        assert h.values.max() == 1.0 or np.all(h.values == 0.0)


def test_gradcam_rejects_bad_class():
    m = KACLModel(seed=0)
    with pytest.raises(ValueError):
        gradcam(m.encoder, m.head, np.zeros((64, 64)), 8)


def test_gradcam_does_not_touch_parameter_grads():
    m = KACLModel(seed=0)
    img = np.random.default_rng(4).uniform(size=(1, 1, 64, 64))
    y, _ = m.encoder.forward(Tensor(img))
    backward(m.classify(y).sum())
    before = {k: p.grad.copy() for k, p in m.encoder.params.items()}
    gradcam(m.encoder, m.head, img[0, 0], 2)
    for k, p in m.encoder.params.items():
        assert p.grad.tobytes() == before[k].tobytes()


def test_block_box():
    h = np.zeros((64, 64))
    h[20:30, 20:30] = 1.0
    assert threshold_to_bbox(h, 0.5) == BoundingBox(20, 20, 30, 30)


def test_uniform_map_falls_back():
    fb = centered_box(64, 64)
    assert fb == BoundingBox(16, 16, 48, 48) and fb.area == 64 * 64 // 4
    assert threshold_to_bbox(np.full((64, 64), 0.3), 0.5, fb) == fb
    assert threshold_to_bbox(np.full((64, 64), 0.3), 0.5) == fb


def test_largest_component_wins():
    h = np.zeros((64, 64))
    h[2:5, 2:5] = 1.0
    h[40:45, 30:35] = 0.9
    assert threshold_to_bbox(h, 0.5) == BoundingBox(30, 40, 35, 45)


def test_four_connectivity():
    h = np.zeros((16, 16))
    h[2, 2] = h[3, 3] = h[4, 4] = 1.0
    h[10, 10:12] = 1.0
    # diagonal pixels are three separate components of area 1
    assert threshold_to_bbox(h, 0.5) == BoundingBox(10, 10, 12, 11)


def test_threshold_must_be_open_interval():
    with pytest.raises(ValueError):
        threshold_to_bbox(np.zeros((4, 4)), 1.0)


def test_threshold_monotone():
    rng = np.random.default_rng(5)
    for _ in range(50):
        raw = ndimage.gaussian_filter(rng.normal(size=(32, 32)), 3)
        raw = (raw - raw.min()) / (raw.max() - raw.min())
        lo_t, hi_t = sorted(rng.uniform(0.2, 0.9, size=2))
        hi_box = threshold_to_bbox(raw, hi_t, BoundingBox(0, 0, 1, 1))
        if not (raw > hi_t).any():
            continue
        labels, _ = ndimage.label(raw > lo_t)
        comp = labels[hi_box.y0:hi_box.y1, hi_box.x0:hi_box.x1][
            (raw > hi_t)[hi_box.y0:hi_box.y1, hi_box.x0:hi_box.x1]][0]
        ys, xs = np.nonzero(labels == comp)
        assert xs.min() <= hi_box.x0 and ys.min() <= hi_box.y0
        assert hi_box.x1 <= xs.max() + 1 and hi_box.y1 <= ys.max() + 1


def test_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(20, 20, 30, 30)) == 0.0
    assert abs(iou(a, BoundingBox(5, 5, 15, 15)) - 25 / 175) < 1e-12


def test_iou_matches_pixel_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        boxes = []
        for _ in range(2):
            x0, y0 = rng.integers(0, 30, size=2)
            x1, y1 = x0 + rng.integers(1, 20), y0 + rng.integers(1, 20)
            boxes.append(BoundingBox(int(x0), int(y0), int(x1), int(y1)))
        a, b = boxes
        assert abs(iou(a, b) - pixel_iou(a, b)) < 1e-12
        assert iou(a, b) == iou(b, a)


def test_box_validity():
    assert BoundingBox(0, 0, 64, 64).is_valid(64, 64)
    assert not BoundingBox(3, 3, 3, 5).is_valid(64, 64)
    assert not BoundingBox(0, 0, 65, 10).is_valid(64, 64)
