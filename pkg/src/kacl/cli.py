"""Command line entry point: ``kacl <command>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from kacl import __version__
from kacl.config import RunConfig, config_hash
from kacl.gradcam import cams_from_graph, centered_box, iou, threshold_to_bbox
from kacl.losses import NumericalError
from kacl.metrics import DEFAULT_IOU_THRESHOLDS
from kacl.models import CheckpointError, load_model
from kacl.radiomics import FEATURE_NAMES, REGISTRY_HASH, RadiomicsError, extract
from kacl.sampling import NORMAL, DiseaseHierarchy
from kacl.synthcxr import PGM_MAX, DataError, DatasetSpec, generate, load, write_pgm
from kacl.tensor import ConfigurationError, Tensor
from kacl.trainer import (TrainingAborted, ablate, ablation_table, evaluate_checkpoint, fit, fit_stats,
                          render_ablation)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("kacl")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        choices = getattr(self, "_command_names", None)
        bad = re.search(r"invalid choice: '([^']*)'", message)
        if choices and bad:
            close = difflib.get_close_matches(bad.group(1), choices, n=1)
            if close:
                message += f" (did you mean {close[0]!r}?)"
        unknown = re.search(r"unrecognized arguments: (\S+)", message)
        flags = getattr(self, "_all_flags", None)
        if flags and unknown:
            close = difflib.get_close_matches(unknown.group(1).split("=")[0], flags, n=1)
            if close:
                message += f" (did you mean {close[0]!r}?)"
        raise UsageError(f"{self.prog}: {message}")


def parse_thresholds(text: str) -> tuple[float, ...]:
    """``0.1:0.7:0.1`` (inclusive range) or ``0.1,0.3,0.5``."""
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            return tuple(round(lo + k * step, 10) for k in range(n + 1))
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def build_parser() -> Parser:
    p = Parser(prog="kacl", description="Knowledge-augmented contrastive training on synthetic chest phantoms.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=None, help="override the seed of the dataset spec or run config")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--quiet", action="store_true", help="only print errors")
    mode.add_argument("--json", action="store_true", help="print machine-readable JSON")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for dataset generation and radiomics extraction")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--spec", help="dataset spec JSON (defaults used when omitted)")
    g.add_argument("--hierarchy", help="disease hierarchy JSON")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)

    a = sub.add_parser("ablate", help="train and compare the four loss variants")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=None, help="number of seeds (0..n-1)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test splits")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="manifest file or dataset directory")
    e.add_argument("--loc-thresholds", type=parse_thresholds, default=DEFAULT_IOU_THRESHOLDS)
    e.add_argument("--out", help="write the JSON report here")

    r = sub.add_parser("extract-radiomics", help="radiomic vectors inside the ground-truth boxes")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--all-boxes", action="store_true",
                   help="include unannotated images whose generator box is stored")

    i = sub.add_parser("inspect", help="diagnostics")
    isub = i.add_subparsers(dest="what", parser_class=Parser)
    isub.required = True
    c = isub.add_parser("cam", help="Grad-CAM heatmap, box and overlay for one image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--dataset", required=True)
    c.add_argument("--image", type=int, required=True)
    c.add_argument("--class", dest="cls", required=True, help="disease name or index")
    c.add_argument("--out", help="output prefix (default: cam_<image>)")
    c.add_argument("--cam-threshold", type=float, default=None)
    isub._command_names = ["cam"]

    sub._command_names = list(sub.choices)
    p._command_names = list(sub.choices)
    for sp in sub.choices.values():
        sp._command_names = getattr(sp, "_command_names", None)
    parsers = [p, *sub.choices.values(), *isub.choices.values()]
    p._all_flags = sorted({f for q in parsers for act in q._actions for f in act.option_strings if f.startswith("--")})
    return p


class Output:
    def __init__(self, quiet: bool, as_json: bool):
        self.quiet, self.as_json = quiet, as_json

    def text(self, msg: str):
        if not self.quiet and not self.as_json:
            print(msg)

    def result(self, obj: dict, text: str | None = None):
        if self.as_json:
            print(json.dumps(obj, sort_keys=True))
        elif not self.quiet:
            print(text if text is not None else json.dumps(obj, indent=1, sort_keys=True))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _load_config(path, seed) -> RunConfig:
    try:
        cfg = RunConfig.from_dict(_read_json(path), Path(path).parent)
        if seed is not None:
            cfg.train = type(cfg.train).from_dict({**cfg.train.to_dict(), "seed": seed})
    except ValueError as exc:
        raise UsageError(f"bad config {path}: {exc}") from None
    return cfg


def _dataset_for(cfg: RunConfig, threads: int):
    if cfg.manifest is not None:
        return load(cfg.manifest)
    root = cfg.out_dir / "dataset"
    if (root / "manifest.json").exists():
        ds = load(root)
        if ds.spec == cfg.dataset:
            return ds
    return generate(cfg.dataset, root, threads=threads)


def _write_text(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def cmd_generate(args, out: Output) -> int:
    try:
        spec = DatasetSpec.from_dict(_read_json(args.spec)) if args.spec else DatasetSpec()
        if args.seed is not None:
            spec = DatasetSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad dataset spec: {exc}") from None
    hierarchy = DiseaseHierarchy.from_dict(_read_json(args.hierarchy)) if args.hierarchy else None
    ds = generate(spec, args.out, hierarchy, threads=args.threads)
    counts = {k: len(v) for k, v in ds.splits.items()}
    out.result({"out": str(args.out), "images": len(ds.entries), "splits": counts, "config_hash": spec.digest()},
               f"wrote {len(ds.entries)} images to {args.out} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(args, out: Output) -> int:
    cfg = _load_config(args.config, args.seed)
    ds = _dataset_for(cfg, args.threads)
    res = fit(ds, cfg.train, cfg.out_dir, cfg.hash)
    report = evaluate_checkpoint(res.eval_checkpoint, ds, cfg.loc_thresholds)
    digest = _write_text(cfg.out_dir / "report.json", report.to_json())
    _write_text(cfg.out_dir / "report.txt", report.render())
    out.result({"checkpoint": str(res.eval_checkpoint), "best_epoch": res.best_epoch,
                "mean_auc": report.mean_auc, "report_sha256": digest, **report.meta},
               report.render() + f"report sha256 {digest}")
    return EXIT_OK


def cmd_ablate(args, out: Output) -> int:
    cfg = _load_config(args.config, None)
    seeds = tuple(range(args.seeds)) if args.seeds is not None else cfg.seeds
    if args.seed is not None:
        seeds = tuple(args.seed + s for s in range(len(seeds)))
    ds = _dataset_for(cfg, args.threads)
    results = ablate(ds, cfg.train, cfg.out_dir / "ablation", seeds, cfg.hash, cfg.loc_thresholds)
    rows = ablation_table(results)
    per_seed = {str(s): {v: {"mean_auc": r.mean_auc, "loc50": r.loc_mean(0.5), "monotone": r.monotone}
                    for v, r in reps.items()}
                for s, reps in results.items()}
    summary = {"meta": {"config_hash": cfg.hash, "seeds": list(seeds), "artifact_version": __version__},
               "table": rows, "per_seed": per_seed}
    text = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    _write_text(cfg.out_dir / "ablation" / "summary.json", text)
    stamp = f"config_hash={cfg.hash} seeds={','.join(map(str, seeds))} artifact_version={__version__}\n"
    _write_text(cfg.out_dir / "ablation" / "table.txt", render_ablation(rows) + "\n" + stamp)
    out.result(summary, render_ablation(rows))
    return EXIT_OK


def cmd_eval(args, out: Output) -> int:
    ds = load(args.dataset)
    report = evaluate_checkpoint(args.checkpoint, ds, args.loc_thresholds)
    if args.out:
        _write_text(Path(args.out), report.to_json())
    out.result(report.to_dict(), report.render())
    return EXIT_OK


def cmd_extract(args, out: Output) -> int:
    """CSV: image_id, label, box, then the 33 features in registry order."""
    ds = load(args.manifest)
    stats = fit_stats(ds)
    items = [it for it in ds.iter_images() if it.gt_box is not None and (it.annotated or args.all_boxes)]

    def one(it):
        try:
            return extract(it.pixels, it.gt_box, stats)
        except RadiomicsError as exc:
            return exc

    # map keeps input order, so the file does not depend on the thread count
    with ThreadPoolExecutor(max(1, args.threads)) as pool:
        vectors = list(pool.map(one, items))
    rows, skipped = [], []
    for it, vec in zip(items, vectors):
        if isinstance(vec, RadiomicsError):
            log.warning("image %d skipped: %s", it.id, vec)
            skipped.append(it.id)
            continue
        rows.append([it.id, ds.hierarchy.disease_names[it.label], " ".join(map(str, it.gt_box.to_list()))]
                    + [repr(float(v)) for v in vec])
    chash = config_hash({"manifest": ds.meta.get("config_hash"), "all_boxes": args.all_boxes})
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config_hash={chash} seed={ds.spec.seed} artifact_version={__version__} "
                 f"feature_registry={REGISTRY_HASH}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id", "label", "box", *FEATURE_NAMES])
        writer.writerows(rows)
    out.result({"out": args.out, "rows": len(rows), "skipped": skipped, "config_hash": chash},
               f"wrote {len(rows)} radiomic vectors to {args.out} ({len(skipped)} skipped)")
    return EXIT_OK


def _class_index(text: str, names: list[str]) -> int:
    if text.lstrip("-").isdigit():
        k = int(text)
        if 0 <= k < len(names):
            return k
        raise UsageError(f"class index {k} out of range 0..{len(names) - 1}")
    if text in names:
        return names.index(text)
    close = difflib.get_close_matches(text, names, n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    raise UsageError(f"unknown class {text!r}{hint}")


def overlay(pixels: np.ndarray, heat: np.ndarray, box) -> np.ndarray:
    """Half image, half heatmap, with the box outline at full intensity; 16-bit."""
    img = 0.5 * np.clip(pixels, 0, 1) + 0.5 * heat
    x0, y0, x1, y1 = box
    img[y0, x0:x1] = img[y1 - 1, x0:x1] = 1.0
    img[y0:y1, x0] = img[y0:y1, x1 - 1] = 1.0
    return np.round(img * PGM_MAX).astype(np.uint16)


def cmd_inspect_cam(args, out: Output) -> int:
    ds = load(args.dataset)
    model, meta, digest = load_model(args.checkpoint)
    try:
        item = ds.image(args.image)
    except KeyError:
        raise UsageError(f"image {args.image} is not in the dataset") from None
    cls = _class_index(args.cls, ds.hierarchy.disease_names)
    thr = meta.get("cam_threshold", 0.5) if args.cam_threshold is None else args.cam_threshold
    h, w = item.pixels.shape
    y, stage4 = model.encoder.forward(Tensor(item.pixels[None, None]))
    logits = model.head.logits(y)
    heat = cams_from_graph(logits, stage4, [cls], (h, w))[0]
    box = threshold_to_bbox(heat, thr, centered_box(w, h))
    prefix = Path(args.out or f"cam_{args.image}")
    stamp = f"config_hash={meta.get('config_hash')} seed={meta.get('seed')} artifact_version={__version__}"
    write_pgm(prefix.with_suffix(".pgm"), overlay(item.pixels, heat, box), comment=stamp)
    prob = float(1.0 / (1.0 + np.exp(-logits.data[0, cls])))
    record = {
        "image_id": item.id, "class": ds.hierarchy.disease_names[cls], "class_index": cls,
        "label": None if item.label == NORMAL else ds.hierarchy.disease_names[item.label],
        "probability": prob, "threshold": thr, "box": box.to_list(),
        "gt_box": item.gt_box.to_list() if item.gt_box is not None else None,
        "iou": iou(box, item.gt_box) if item.gt_box is not None else None,
        "heatmap_max_at": [int(v) for v in np.unravel_index(np.argmax(heat), heat.shape)[::-1]],
        "meta": {"checkpoint_id": digest[:16], "config_hash": meta.get("config_hash"),
                 "seed": meta.get("seed"), "artifact_version": __version__},
    }
    _write_text(prefix.with_suffix(".json"), json.dumps(record, indent=1, sort_keys=True) + "\n")
    out.result(record, f"class {record['class']} p={prob:.3f} box {record['box']} gt {record['gt_box']} "
                       f"iou {record['iou']}; wrote {prefix.with_suffix('.pgm')}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "ablate": cmd_ablate, "eval": cmd_eval,
            "extract-radiomics": cmd_extract}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = logging.ERROR if args.quiet or args.json else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    out = Output(args.quiet, args.json)
    handler = cmd_inspect_cam if args.command == "inspect" else COMMANDS[args.command]
    try:
        return handler(args, out)
    except UsageError as exc:
        print(f"kacl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"kacl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericalError as exc:
        print(f"kacl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, ConfigurationError, RadiomicsError, OSError) as exc:
        print(f"kacl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
