"""Joint training loop, evaluation and the four-variant ablation.

One step: encode the batch, focal loss on every image; for disease-positive
images take the ground-truth box (annotated) or the Grad-CAM box of the
labeled class under the current weights, extract radiomics inside it, and
contrast image projections against radiomic projections. Boxes and
radiomics are constants of the step; gradients reach only the networks.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from kacl import __version__
from kacl.gradcam import BoundingBox, cams_from_graph, centered_box, threshold_to_bbox
from kacl.losses import LossConfig, NumericalError, focal_loss, kacl_loss, total_loss
from kacl.metrics import DEFAULT_IOU_THRESHOLDS, LocalizationTable, eval_auc, localization_table
from kacl.models import KACLModel, load_model, save_model
from kacl.radiomics import REGISTRY_HASH, NormalizationStats, RadiomicsError, raw_features
from kacl.sampling import NORMAL, DiseaseHierarchy, build_pairs
from kacl.tensor import Tensor, no_grad, sigmoid

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_fl", "l_cl", "lr", "val_auc", "val_iou50")
VARIANTS = ("base", "w_fl", "w_byop", "full")
VARIANT_LABELS = {"base": "Base", "w_fl": "w. FL", "w_byop": "w. BYOP", "full": "Full model"}


class TrainingAborted(NumericalError):
    def __init__(self, message, last_good: str | None):
        super().__init__(f"{message}; last good checkpoint: {last_good}")
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    lr0: float = 1e-3
    lr_decay: float = 0.1
    decay_period: int = 3
    warmup_epochs: int = 4
    # contrastive branch off (lambda = 0) during warmup
    warmup_gate_contrastive: bool = True
    # linear lr ramp 0 -> lr0 over the warmup epochs
    warmup_lr_ramp: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    normal_cap: int = 8
    gray_levels: int = 8
    widths: tuple[int, ...] = (8, 16, 32, 64)
    proj_dim: int = 32
    # initial sigmoid output of the classifier head
    head_prior: float = 0.01
    eval_batch: int = 128
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        self.widths = tuple(int(w) for w in self.widths)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs)")
        if self.decay_period < 1:
            raise ValueError("decay_period must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.lr0 * cfg.lr_decay ** (epoch // cfg.decay_period)
    if cfg.warmup_lr_ramp and epoch < cfg.warmup_epochs:
        lr *= (epoch + 1) / cfg.warmup_epochs
    return lr


def contrastive_weight(cfg: TrainConfig, epoch: int) -> float:
    if cfg.warmup_gate_contrastive and epoch < cfg.warmup_epochs:
        return 0.0
    return cfg.loss.lam


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class StepMetrics:
    l_fl: float
    l_cl: float
    total: float
    n_pairs: int
    boxes: dict[int, BoundingBox] = field(default_factory=dict)


def stack_batch(items, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([it.pixels for it in items])[:, None]
    y = np.stack([it.target(n_classes) for it in items])
    return x, y


def train_step(batch, model: KACLModel, optimizer: Adam | None, cfg: TrainConfig,
               stats: NormalizationStats | None, hierarchy: DiseaseHierarchy,
               lam: float | None = None, lr: float | None = None) -> StepMetrics:
    """Forward, losses, backward and (if ``optimizer``) one update on all networks."""
    lam = cfg.loss.lam if lam is None else lam
    x, y = stack_batch(batch, model.head.n_classes)
    model.zero_grad()
    y_i, stage4 = model.encoder.forward(Tensor(x))
    logits = model.head.logits(y_i)
    l_fl = focal_loss(sigmoid(logits), y, cfg.loss)

    l_cl = Tensor(0.0)
    n_pairs = 0
    boxes: dict[int, BoundingBox] = {}
    diseased = [k for k, it in enumerate(batch) if it.label != NORMAL]
    if lam > 0.0 and diseased and model.has_radiomic:
        if stats is None:
            raise ValueError("radiomic normalization stats are required when lambda > 0")
        need_cam = [k for k in diseased if not (batch[k].annotated and batch[k].gt_box is not None)]
        if need_cam:
            classes = np.zeros(len(batch), dtype=int)
            classes[need_cam] = [batch[k].label for k in need_cam]
            cams = cams_from_graph(logits, stage4, classes, x.shape[-2:])
            h, w = x.shape[-2:]
            fallback = centered_box(w, h)
            for k in need_cam:
                boxes[k] = threshold_to_bbox(cams[k], cfg.loss.cam_threshold, fallback)
        pairs = build_pairs(batch, boxes, stats, hierarchy, cfg.normal_cap, cfg.gray_levels)
        if pairs.pairs:
            z_i = model.proj_image.forward(y_i)
            z_r = model.proj_radiomic.forward(model.radiomic_encoder.forward(Tensor(pairs.positives)))
            l_cl = kacl_loss(z_i, pairs.anchors, z_r, pairs.negative_mask(len(batch)), cfg.loss)
            n_pairs = len(pairs.pairs)
    loss = total_loss(l_cl, l_fl, cfg.loss, lam)
    if not math.isfinite(float(loss.data)):
        raise NumericalError(f"total loss is not finite: {float(loss.data)}")
    loss.backward()
    if optimizer is not None:
        optimizer.step(cfg.lr0 if lr is None else lr)
    return StepMetrics(float(l_fl.data), float(l_cl.data), float(loss.data), n_pairs, boxes)


# evaluation -----------------------------------------------------------------

def predict_proba(model: KACLModel, images: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            x = Tensor(np.asarray(images[s:s + batch])[:, None])
            y, _ = model.encoder.forward(x)
            out.append(model.head.forward(y).data)
    return np.concatenate(out) if out else np.zeros((0, model.head.n_classes))


def predict_boxes(model: KACLModel, images: np.ndarray, classes, cam_threshold: float = 0.5,
                  batch: int = 64) -> list[BoundingBox]:
    images = np.asarray(images)
    classes = np.asarray(classes, dtype=int)
    h, w = images.shape[-2:]
    fallback = centered_box(w, h)
    boxes = []
    for s in range(0, len(images), batch):
        x = Tensor(images[s:s + batch][:, None])
        y, stage4 = model.encoder.forward(x)
        cams = cams_from_graph(model.head.logits(y), stage4, classes[s:s + batch], (h, w))
        boxes.extend(threshold_to_bbox(c, cam_threshold, fallback) for c in cams)
    return boxes


def eval_localization(model: KACLModel, images, thresholds=DEFAULT_IOU_THRESHOLDS,
                      cam_threshold: float = 0.5) -> LocalizationTable:
    """Boxes from the ground-truth class's Grad-CAM on annotated test images."""
    items = [it for it in images if it.gt_box is not None and it.label != NORMAL]
    n_classes = model.head.n_classes
    if not items:
        return localization_table([], [], [], n_classes, thresholds)
    pix = np.stack([it.pixels for it in items])
    cls = [it.label for it in items]
    pred = predict_boxes(model, pix, cls, cam_threshold)
    return localization_table(pred, [it.gt_box for it in items], cls, n_classes, thresholds)


@dataclass
class EvalReport:
    class_names: list[str]
    auc: list[float | None]
    mean_auc: float | None
    localization: LocalizationTable
    meta: dict

    @property
    def monotone(self) -> bool:
        return self.localization.is_monotone()

    def loc_mean(self, threshold: float) -> float | None:
        for t, m in zip(self.localization.thresholds, self.localization.mean):
            if abs(t - threshold) < 1e-9:
                return m
        raise KeyError(threshold)

    def to_dict(self) -> dict:
        loc = self.localization
        return {
            "meta": self.meta,
            "classes": self.class_names,
            "auc": {"per_class": dict(zip(self.class_names, self.auc)), "mean": self.mean_auc},
            "localization": {
                "thresholds": loc.thresholds,
                "per_class": [dict(zip(self.class_names, row)) for row in loc.accuracy],
                "mean": loc.mean,
                "counts": dict(zip(self.class_names, loc.counts)),
                "monotone": loc.is_monotone(),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = d["classes"]
        loc = d["localization"]
        table = LocalizationTable(loc["thresholds"], [[row[n] for n in names] for row in loc["per_class"]],
                                  loc["mean"], [loc["counts"][n] for n in names])
        return cls(names, [d["auc"]["per_class"][n] for n in names], d["auc"]["mean"], table, d["meta"])

    def render(self) -> str:
        def fmt(v):
            return "  -  " if v is None else f"{v:.3f}"

        short = [n[:12] for n in self.class_names]
        head = " ".join(f"{s:>12}" for s in short)
        lines = [f"{'':8} {head} {'Mean':>7}",
                 f"{'AUC':8} " + " ".join(f"{fmt(a):>12}" for a in self.auc) + f" {fmt(self.mean_auc):>7}",
                 "", f"{'T(IoU)':8} {head} {'Mean':>7}"]
        loc = self.localization
        for t, row, m in zip(loc.thresholds, loc.accuracy, loc.mean):
            lines.append(f"{t:<8.1f} " + " ".join(f"{fmt(a):>12}" for a in row) + f" {fmt(m):>7}")
        lines.append("")
        lines.append(" ".join(f"{k}={v}" for k, v in sorted(self.meta.items())))
        return "\n".join(lines) + "\n"


def evaluate(model: KACLModel, dataset, thresholds=DEFAULT_IOU_THRESHOLDS, cam_threshold: float = 0.5,
             meta: dict | None = None, split: str = "test", loc_split: str = "annotated_test") -> EvalReport:
    test = dataset.images(split)
    x = np.stack([it.pixels for it in test]) if test else np.zeros((0, 1, 1))
    y = np.stack([it.target(dataset.n_classes) for it in test]) if test else np.zeros((0, dataset.n_classes))
    res = eval_auc(predict_proba(model, x), y)
    table = eval_localization(model, dataset.images(loc_split), thresholds, cam_threshold)
    if not table.is_monotone():
        raise AssertionError("localization accuracy increased with the IoU threshold")
    return EvalReport(dataset.hierarchy.disease_names, res.per_class, res.mean, table, dict(meta or {}))


def evaluate_checkpoint(path, dataset, thresholds=DEFAULT_IOU_THRESHOLDS, cam_threshold: float | None = None):
    model, meta, digest = load_model(path)
    cam = meta.get("cam_threshold", 0.5) if cam_threshold is None else cam_threshold
    info = {"checkpoint_id": digest[:16], "config_hash": meta.get("config_hash"), "seed": meta.get("seed"),
            "artifact_version": __version__}
    return evaluate(model, dataset, thresholds, cam, info)


# fitting --------------------------------------------------------------------

def fit_stats(dataset, n_levels: int = 8) -> NormalizationStats:
    """Z-score statistics from the annotated training images' ground-truth boxes."""
    vecs = []
    for it in dataset.iter_images("annotated_train"):
        if it.gt_box is None:
            continue
        try:
            vecs.append(raw_features(it.pixels, it.gt_box, n_levels))
        except RadiomicsError as exc:
            log.warning("annotated image %d skipped for normalization: %s", it.id, exc)
    if not vecs:
        log.warning("no annotated training boxes; radiomics left unnormalized")
        return NormalizationStats.identity()
    return NormalizationStats.fit(np.stack(vecs))


@dataclass
class FitResult:
    model: KACLModel
    best_epoch: int
    best_checkpoint: Path
    eval_checkpoint: Path
    log_rows: list[dict]
    stats: NormalizationStats


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def fit(dataset, cfg: TrainConfig, out_dir, config_hash: str | None = None) -> FitResult:
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config_hash = config_hash or cfg.digest()
    stats = fit_stats(dataset, cfg.gray_levels)
    hierarchy = dataset.hierarchy
    model = KACLModel(dataset.n_classes, cfg.widths, proj_dim=cfg.proj_dim, seed=cfg.seed, head_prior=cfg.head_prior)
    opt = Adam(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps)

    train_items = dataset.images("annotated_train") + dataset.images("train")
    val = dataset.images("val")
    val_x = np.stack([it.pixels for it in val]) if val else None
    val_y = np.stack([it.target(dataset.n_classes) for it in val]) if val else None
    ann_train = dataset.images("annotated_train")
    meta = {"config_hash": config_hash, "seed": cfg.seed, "feature_registry": REGISTRY_HASH,
            "cam_threshold": cfg.loss.cam_threshold, "stats": stats.to_dict()}

    log_path = out / "train_log.csv"
    new_log = not log_path.exists()
    rows: list[dict] = []
    best = (-math.inf, -1)
    last_good: str | None = None
    with log_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_log:
            fh.write(f"# config_hash={config_hash} seed={cfg.seed} artifact_version={__version__}\n")
            writer.writerow(LOG_COLUMNS)
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg, epoch)
            lam = contrastive_weight(cfg, epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_items))
            fl, cl, n = 0.0, 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                batch = [train_items[i] for i in order[s:s + cfg.batch_size]]
                try:
                    m = train_step(batch, model, opt, cfg, stats, hierarchy, lam, lr)
                except NumericalError as exc:
                    raise TrainingAborted(str(exc), last_good) from exc
                fl += m.l_fl * len(batch)
                cl += m.l_cl * len(batch)
                n += len(batch)
            val_auc = eval_auc(predict_proba(model, val_x), val_y).mean if val else None
            loc = eval_localization(model, ann_train, (0.5,), cfg.loss.cam_threshold).mean[0] if ann_train else None
            row = {"epoch": epoch, "l_fl": fl / n, "l_cl": cl / n, "lr": lr, "val_auc": val_auc, "val_iou50": loc}
            rows.append(row)
            writer.writerow([epoch] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])
            fh.flush()
            path = ckpt_dir / f"epoch_{epoch:03d}.kacl"
            save_model(path, model, epoch=epoch, **meta)
            last_good = str(path)
            score = -math.inf if val_auc is None else val_auc
            # an undefined validation AUC still keeps the first epoch as the best so far
            if score > best[0] or best[1] < 0:
                best = (score, epoch)
                save_model(ckpt_dir / "best.kacl", model, epoch=epoch, **meta)
            log.info("epoch %d lr %.1e L_fl %.4f L_cl %.4f val AUC %s", epoch, lr, fl / n, cl / n, val_auc)

    best_model, _, _ = load_model(ckpt_dir / "best.kacl")
    eval_path = out / "model.kacl"
    eval_meta = {k: v for k, v in meta.items() if k != "stats"}
    save_model(eval_path, best_model, eval_only=True, epoch=best[1], **eval_meta)
    return FitResult(best_model, best[1], ckpt_dir / "best.kacl", eval_path, rows, stats)


# ablation -------------------------------------------------------------------

def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Base: cross-entropy only; w_fl: focal only; w_byop: cross-entropy + contrastive; full: both."""
    ce = {"alpha": 0.5, "gamma": 0.0}
    if variant == "base":
        loss = replace(cfg.loss, lam=0.0, **ce)
    elif variant == "w_fl":
        loss = replace(cfg.loss, lam=0.0)
    elif variant == "w_byop":
        loss = replace(cfg.loss, **ce)
    elif variant == "full":
        loss = replace(cfg.loss)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return replace(cfg, loss=loss)


def ablate(dataset, cfg: TrainConfig, out_dir, seeds=(0,), config_hash: str | None = None,
           thresholds=DEFAULT_IOU_THRESHOLDS) -> dict[int, dict[str, EvalReport]]:
    out = Path(out_dir)
    results: dict[int, dict[str, EvalReport]] = {}
    for seed in seeds:
        results[seed] = {}
        for variant in VARIANTS:
            vcfg = replace(variant_config(cfg, variant), seed=seed)
            vhash = vcfg.digest() if config_hash is None else f"{config_hash}:{variant}"
            res = fit(dataset, vcfg, out / f"seed{seed}" / variant, vhash)
            report = evaluate_checkpoint(res.eval_checkpoint, dataset, thresholds)
            report.meta["variant"] = variant
            results[seed][variant] = report
            log.info("seed %d %s mean AUC %.4f", seed, variant, report.mean_auc or float("nan"))
    return results


def ablation_table(results: dict[int, dict[str, EvalReport]]) -> list[dict]:
    """One row per variant: per-class AUC averaged over seeds, plus the mean."""
    rows = []
    for variant in VARIANTS:
        reps = [results[s][variant] for s in sorted(results)]
        names = reps[0].class_names
        per = []
        for k in range(len(names)):
            vals = [r.auc[k] for r in reps if r.auc[k] is not None]
            per.append(float(np.mean(vals)) if vals else None)
        rows.append({"variant": VARIANT_LABELS[variant],
                     "auc": dict(zip(names, per)),
                     "mean": float(np.mean([r.mean_auc for r in reps])),
                     "loc50": float(np.mean([r.loc_mean(0.5) or 0.0 for r in reps]))})
    return rows


def read_log(path) -> list[dict]:
    """Rows of a training log; the leading ``#`` line carries the run identity."""
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def render_ablation(rows: list[dict]) -> str:
    names = list(rows[0]["auc"])
    lines = [f"{'Method':12} " + " ".join(f"{n[:12]:>12}" for n in names) + f" {'Mean':>7} {'Loc@0.5':>8}"]
    for r in rows:
        cells = " ".join(f"{'-' if v is None else format(v, '.3f'):>12}" for v in r["auc"].values())
        lines.append(f"{r['variant']:12} {cells} {r['mean']:>7.3f} {r['loc50']:>8.3f}")
    return "\n".join(lines) + "\n"
