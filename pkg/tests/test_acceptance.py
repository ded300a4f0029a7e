"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The end-to-end ablation is slow (tens of minutes). Set KACL_SKIP_ABLATION=1 to skip it.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import radiomics_oracle as oracle
from kacl.cli import main
from kacl.gradcam import BoundingBox, cams_from_graph, iou
from kacl.losses import LossConfig, focal_loss, kacl_pair_loss, total_loss
from kacl.models import KACLModel
from kacl.radiomics import FEATURE_NAMES, raw_features
from kacl.sampling import NORMAL, DiseaseHierarchy, negative_candidates
from kacl.tensor import (Tensor, batch_mean, conv2d, global_avg_pool, grad_check, linear, matmul, max_pool2d,
                         relu, sigmoid, tmean)
from oracles import bilinear_loop, pixel_iou

ROOT = Path(__file__).resolve().parents[1]
ACCEPTANCE_CONFIG = ROOT / "configs" / "acceptance.json"


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def layer_op_errors(rng):
    """Worst grad_check error per layer op on one random draw."""
    w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    x = rng.normal(size=(2, 2, 6, 6))
    kinked = rng.normal(size=(4, 5))
    # keep preactivations away from the relu kink
    kinked = np.where(np.abs(kinked) < 1e-3, 0.5, kinked)
    xp = rng.permutation(64).reshape(1, 1, 8, 8) / 8.0
    W, bl, xin = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(5, 3))
    return {
        "conv2d": max(grad_check(lambda t: (conv2d(t, T(w), T(b), 1, 1) ** 2).sum(), x),
                      grad_check(lambda t: (conv2d(T(x), t, T(b), 2, 1) ** 2).sum(), w),
                      grad_check(lambda t: (conv2d(T(x), T(w), t, 1, 0) ** 2).sum(), b)),
        "relu": grad_check(lambda t: (relu(t) ** 2).sum(), kinked),
        "sigmoid": grad_check(lambda t: (sigmoid(t) ** 2).sum(), rng.normal(size=7)),
        "max_pool2d": grad_check(lambda t: (max_pool2d(t, 2) ** 2).sum(), xp, eps=1e-5),
        "global_avg_pool": grad_check(lambda t: (global_avg_pool(t) ** 2).sum(), x),
        "batch_mean": grad_check(lambda t: (batch_mean(t) ** 2).sum(), rng.normal(size=(5, 3))),
        "linear": max(grad_check(lambda t: (linear(t, T(W), T(bl)) ** 2).sum(), xin),
                      grad_check(lambda t: (linear(T(xin), t, T(bl)) ** 2).sum(), W),
                      grad_check(lambda t: (linear(T(xin), T(W), t) ** 2).sum(), bl)),
    }


def composite_error(seed):
    """Image encoder + classifier head + focal loss on one 16x16 image."""
    rng = np.random.default_rng(seed)
    model = KACLModel(n_classes=8, widths=(2, 3, 3, 4), seed=seed)
    x = rng.uniform(size=(1, 1, 16, 16))
    y = (rng.uniform(size=(1, 8)) < 0.3).astype(float)

    def f(t):
        feats, _ = model.encoder.forward(t)
        return focal_loss(model.classify(feats), y, LossConfig())

    return grad_check(f, x)


def test_autodiff_correctness(criterion):
    start = time.perf_counter()
    worst = {}
    for seed in range(100):
        for op, err in layer_op_errors(np.random.default_rng(seed)).items():
            worst[op] = max(worst.get(op, 0.0), err)
        worst["encoder+focal"] = max(worst.get("encoder+focal", 0.0), composite_error(seed))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    criterion("autodiff grad_check", ok,
              f"worst {max(worst.values()):.1e} ({max(worst, key=worst.get)}) over 100 seeds in {elapsed:.1f}s")
    assert ok, worst


def random_roi(rng, kind):
    h, w = (int(v) for v in rng.integers(4, 17, size=2))
    if kind == "uniform":
        return rng.uniform(size=(h, w))
    if kind == "few_levels":
        return rng.integers(0, 3, size=(h, w)).astype(float)
    yy, xx = np.mgrid[0:h, 0:w]
    return np.sin(yy / 3.0) + np.cos(xx / 2.0) + 0.1 * rng.normal(size=(h, w))


def test_radiomics_oracle(criterion):
    start = time.perf_counter()
    worst, where = 0.0, ""
    for k, kind in enumerate(("uniform", "few_levels", "smooth")):
        rng = np.random.default_rng(100 + k)
        for _ in range(200):
            roi = random_roi(rng, kind)
            h, w = roi.shape
            img = np.zeros((h + 4, w + 6))
            img[2:2 + h, 3:3 + w] = roi
            box = BoundingBox(3, 2, 3 + w, 2 + h)
            ours = raw_features(img, box)
            ref = oracle.features(img.tolist(), tuple(box))
            for name, a, b in zip(FEATURE_NAMES, ours, ref):
                err = abs(a - b) / max(1.0, abs(b))
                if err > worst:
                    worst, where = err, f"{kind}/{name}"
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 120
    criterion("radiomics oracle", ok, f"worst relative error {worst:.1e} at {where or '-'}, "
                                      f"600 ROIs x 33 features in {elapsed:.1f}s")
    assert ok


def test_iou_oracle(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        boxes = []
        for _ in range(2):
            x0, y0 = (int(v) for v in rng.integers(0, 30, size=2))
            boxes.append(BoundingBox(x0, y0, x0 + int(rng.integers(1, 20)), y0 + int(rng.integers(1, 20))))
        worst = max(worst, abs(iou(*boxes) - pixel_iou(*boxes)))
    worked = iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 15, 15))
    ok = worst < 1e-12 and abs(worked - 25 / 175) < 1e-12
    criterion("iou oracle", ok, f"worst deviation {worst:.1e} over 100 pairs, worked case {worked:.6f}")
    assert ok


def test_loss_closed_forms(criterion):
    pair = float(kacl_pair_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]), [np.array([0.0, 1.0])],
                                LossConfig(tau=1.0)).data)
    pair_err = abs(pair - math.log(1 + math.exp(-1)))
    rng = np.random.default_rng(3)
    cfg = LossConfig(alpha=0.5, gamma=0.0)
    focal_err = 0.0
    for _ in range(1000):
        p = rng.uniform(1e-6, 1 - 1e-6)
        y = int(rng.integers(0, 2))
        bce = -(y * math.log(p) + (1 - y) * math.log(1 - p))
        focal_err = max(focal_err, abs(float(focal_loss(Tensor(np.array([p])), np.array([y]), cfg).data) - 0.5 * bce))
    cl, fl = Tensor(1.7), Tensor(0.3)
    ends = (float(total_loss(cl, fl, LossConfig(), lam=0.0).data) == 0.3
            and float(total_loss(cl, fl, LossConfig(), lam=1.0).data) == 1.7)
    ok = pair_err < 1e-9 and focal_err < 1e-12 and ends
    criterion("loss closed forms", ok,
              f"single pair err {pair_err:.1e}, focal vs half-BCE err {focal_err:.1e}, lambda endpoints exact={ends}")
    assert ok


def test_gradcam_analytic(criterion):
    rng = np.random.default_rng(1)
    acts = rng.normal(size=(3, 5, 8, 8))
    stage4 = Tensor(acts, requires_grad=True)
    select = np.zeros((5, 1))
    select[0, 0] = 1.0
    # score = spatial mean of channel 0
    logits = matmul(tmean(stage4, axis=(2, 3)), Tensor(select))
    cams = cams_from_graph(logits, stage4, [0, 0, 0], (64, 64))
    worst = 0.0
    for n in range(3):
        up = bilinear_loop(np.maximum(acts[n, 0] / 64.0, 0.0), 64, 64)
        worst = max(worst, float(np.max(np.abs(cams[n] - up / up.max()))))
    ok = worst < 1e-6
    criterion("grad-cam analytic case", ok, f"max deviation {worst:.1e}")
    assert ok


class Item:
    def __init__(self, label):
        self.label = label


def test_sampling_rule(criterion):
    h = DiseaseHierarchy.synthetic()
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(1000):
        labels = [int(v) for v in rng.integers(-1, h.n_diseases, size=rng.integers(1, 20))]
        batch = [Item(v) for v in labels]
        for k, lab in enumerate(labels):
            if lab == NORMAL:
                continue
            for j in negative_candidates(lab, batch, h, anchor_index=k):
                other = labels[j]
                bad += not (other == NORMAL or (other != lab and h.part_of(other) == h.part_of(lab)))
    chest = DiseaseHierarchy.chest_21()
    batch = [Item(chest.index(n)) for n in ("Atelectasis", "Edema", "Normal", "Bone Fractures")]
    example = negative_candidates(chest.index("Pneumonia"), batch, chest)
    ok = bad == 0 and example == [0, 1, 2]
    criterion("sampling rule", ok, f"{bad} violating negatives over 1000 batches, worked example -> {example}")
    assert ok


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    (root / "spec.json").write_text(json.dumps({"n_images": 120, "annotated_fraction": 0.15, "seed": 5}))
    assert main(["--quiet", "generate", "--spec", str(root / "spec.json"), "--out", str(root / "data")]) == 0
    return root


def test_determinism(small_dataset, criterion):
    root = small_dataset
    train = {"epochs": 3, "warmup_epochs": 1, "batch_size": 16, "widths": [4, 8, 8, 16], "proj_dim": 8}
    for name in ("one", "two"):
        cfg = {"dataset": "data/manifest.json", "out": name, "train": train, "seeds": [0]}
        (root / f"{name}.json").write_text(json.dumps(cfg))
        assert main(["--quiet", "train", "--config", str(root / f"{name}.json")]) == 0
        assert main(["--quiet", "eval", "--checkpoint", str(root / name / "model.kacl"), "--dataset",
                     str(root / "data"), "--out", str(root / name / "eval.json")]) == 0
    files = sorted(p.relative_to(root / "one") for p in (root / "one").rglob("*")
                   if p.is_file() and p.suffix in (".kacl", ".json", ".txt", ".csv"))
    differing = [str(f) for f in files if (root / "one" / f).read_bytes() != (root / "two" / f).read_bytes()]
    ok = len(files) >= 6 and not differing
    criterion("determinism", ok, f"{len(files)} artifacts compared, {len(differing)} differ {differing[:3]}")
    assert ok


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    if os.environ.get("KACL_SKIP_ABLATION"):
        pytest.skip("KACL_SKIP_ABLATION is set")
    root = tmp_path_factory.mktemp("ablation")
    cfg = json.loads(ACCEPTANCE_CONFIG.read_text())
    cfg["out"] = str(root / "run")
    (root / "acceptance.json").write_text(json.dumps(cfg))
    start = time.perf_counter()
    assert main(["--quiet", "ablate", "--config", str(root / "acceptance.json")]) == 0
    elapsed = time.perf_counter() - start
    summary = json.loads((root / "run" / "ablation" / "summary.json").read_text())
    return summary, elapsed


ORDER = ("full", "w_byop", "w_fl", "base")


def test_ablation_direction(ablation, criterion):
    summary, elapsed = ablation
    per_seed = summary["per_seed"]
    ordered = 0
    lines = []
    for seed, res in sorted(per_seed.items()):
        aucs = [res[v]["mean_auc"] for v in ORDER]
        ordered += all(a > b for a, b in zip(aucs, aucs[1:]))
        lines.append(f"seed {seed}: " + " ".join(f"{v}={a:.3f}" for v, a in zip(ORDER, aucs)))
    full_auc = float(np.mean([r["full"]["mean_auc"] for r in per_seed.values()]))
    full_loc = float(np.mean([r["full"]["loc50"] or 0.0 for r in per_seed.values()]))
    base_loc = float(np.mean([r["base"]["loc50"] or 0.0 for r in per_seed.values()]))
    print("\n".join(lines))
    checks = {
        "ordering": criterion("ablation ordering full > w_byop > w_fl > base", ordered >= 2,
                              f"holds in {ordered}/{len(per_seed)} seeds"),
        "full_auc": criterion("ablation full mean AUC >= 0.85", full_auc >= 0.85, f"{full_auc:.3f}"),
        "loc": criterion("ablation full loc@0.5 beats base by >= 0.05", full_loc - base_loc >= 0.05,
                         f"full {full_loc:.3f} vs base {base_loc:.3f}"),
        "runtime": criterion("ablation runtime < 1 h", elapsed < 3600, f"{elapsed / 60:.1f} min"),
    }
    assert all(checks.values()), checks


def test_localization_monotone_on_every_eval(ablation, criterion):
    summary, _ = ablation
    flags = [r["monotone"] for res in summary["per_seed"].values() for r in res.values()]
    ok = all(flags)
    criterion("localization monotone", ok, f"{sum(flags)}/{len(flags)} evaluation runs non-increasing in T(IoU)")
    assert ok
