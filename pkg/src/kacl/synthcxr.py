"""Deterministic phantom "chest X-ray" datasets.

Each image is a smooth low-frequency background over three vertical
body-part bands. Diseased images carry one lesion inside the band of the
disease's body part; every disease has its own lesion generator (size,
intensity profile, texture). Images are stored as 16-bit binary PGM files
next to a ``manifest.json`` holding labels, boxes, splits and sha256 sums.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from kacl import __version__
from kacl.gradcam import BoundingBox
from kacl.sampling import NORMAL, DiseaseHierarchy

PGM_MAX = 65535
MANIFEST = "manifest.json"
SPLITS = ("annotated_train", "annotated_test", "train", "val", "test")

# relative frequency of each disease among diseased images
DEFAULT_FREQUENCIES = (0.16, 0.10, 0.15, 0.17, 0.11, 0.11, 0.08, 0.12)


class DataError(Exception):
    """Dataset cannot be produced or consumed."""


class ChecksumError(DataError):
    pass


class MissingFileError(DataError):
    pass


@dataclass
class DatasetSpec:
    n_images: int = 2000
    imbalance_ratio: float = 3.4
    disease_frequencies: tuple[float, ...] = DEFAULT_FREQUENCIES
    annotated_fraction: float = 0.008
    unannotated_split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    annotated_split: tuple[float, float] = (0.2, 0.8)
    seed: int = 0
    size: int = 64
    noise_sigma: float = 0.02

    def __post_init__(self):
        self.disease_frequencies = tuple(float(f) for f in self.disease_frequencies)
        self.unannotated_split = tuple(float(f) for f in self.unannotated_split)
        self.annotated_split = tuple(float(f) for f in self.annotated_split)
        if self.n_images < 1:
            raise ValueError("n_images must be positive")
        if self.imbalance_ratio <= 0:
            raise ValueError("imbalance_ratio must be positive")
        if len(self.disease_frequencies) != len(LESIONS):
            raise ValueError(f"need {len(LESIONS)} disease frequencies")
        for name, fr in (("disease_frequencies", self.disease_frequencies),
                         ("unannotated_split", self.unannotated_split),
                         ("annotated_split", self.annotated_split)):
            if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be non-negative and sum to 1")
        if not 0.0 <= self.annotated_fraction <= 1.0:
            raise ValueError("annotated_fraction must lie in [0, 1]")
        if self.size < 16:
            raise ValueError("images must be at least 16x16")
        if self.n_annotated > self.n_images - self.n_normal:
            raise ValueError("more annotated images requested than diseased images exist")

    @property
    def n_normal(self) -> int:
        return int(round(self.n_images * self.imbalance_ratio / (1.0 + self.imbalance_ratio)))

    @property
    def n_annotated(self) -> int:
        return int(round(self.n_images * self.annotated_fraction))

    def disease_counts(self) -> list[int]:
        return _largest_remainder(self.n_images - self.n_normal, self.disease_frequencies)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("disease_frequencies", "unannotated_split", "annotated_split"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _largest_remainder(total: int, weights) -> list[int]:
    raw = [total * w for w in weights]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


@dataclass
class LabeledImage:
    id: int
    pixels: np.ndarray
    label: int
    body_part: int
    gt_box: BoundingBox | None = None
    annotated: bool = False
    split: str = ""

    def __post_init__(self):
        if self.annotated and self.gt_box is None:
            raise ValueError(f"annotated image {self.id} has no box")
        if self.label == NORMAL and self.gt_box is not None:
            raise ValueError(f"normal image {self.id} cannot have a box")

    def target(self, n_classes: int) -> np.ndarray:
        y = np.zeros(n_classes)
        if self.label != NORMAL:
            y[self.label] = 1.0
        return y


# lesion generators ----------------------------------------------------------
# Each returns (layer, support) on a (2R+1)-wide square patch centered on the lesion.

def _grid(r: int):
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    return yy, xx


def _stripes(rng, amp):
    r = 9
    yy, xx = _grid(r)
    rx, ry = rng.uniform(7.0, 9.0), rng.uniform(4.0, 5.5)
    support = (xx / rx) ** 2 + (yy / ry) ** 2 < 1.0
    phase = rng.uniform(0, 2 * np.pi)
    layer = amp * (0.5 + 0.5 * np.cos(2 * np.pi * yy / 3.0 + phase)) + 0.15 * amp
    return layer * support, support


def _dome(rng, amp):
    r = 12
    yy, xx = _grid(r)
    big = rng.uniform(9.5, 11.5)
    d2 = (xx ** 2 + yy ** 2) / big ** 2
    support = d2 < 1.0
    return amp * (1.0 - d2) * support, support


def _plateau(rng, amp):
    r = 12
    yy, xx = _grid(r)
    rx, ry = rng.uniform(4.5, 6.0), rng.uniform(9.0, 11.0)
    d2 = (xx / rx) ** 2 + (yy / ry) ** 2
    support = d2 < 1.0
    return amp * np.minimum(1.0, 3.0 * (1.0 - d2)) * support, support


def _speckle(rng, amp):
    r = 8
    yy, xx = _grid(r)
    rad = rng.uniform(6.5, 8.0)
    support = xx ** 2 + yy ** 2 < rad ** 2
    return amp * rng.uniform(0.1, 1.0, size=xx.shape) * support, support


def _disc(rng, amp):
    r = 10
    yy, xx = _grid(r)
    rad = rng.uniform(7.5, 9.5)
    support = xx ** 2 + yy ** 2 < rad ** 2
    return amp * support.astype(np.float64), support


def _nodule(rng, amp):
    r = 4
    yy, xx = _grid(r)
    rad = rng.uniform(2.8, 4.0)
    d2 = (xx ** 2 + yy ** 2) / rad ** 2
    support = d2 < 1.0
    return amp * (1.0 - 0.6 * d2) * support, support


def _ring(rng, amp):
    r = 10
    yy, xx = _grid(r)
    rad = rng.uniform(7.0, 9.0)
    dist = np.sqrt(xx ** 2 + yy ** 2)
    support = np.abs(dist - rad) < 1.6
    return amp * support.astype(np.float64), support


def _lattice(rng, amp):
    r = 8
    yy, xx = _grid(r)
    half = rng.integers(6, 9)
    support = (np.abs(xx) <= half) & (np.abs(yy) <= half)
    dots = ((xx.astype(int) % 3 == 0) & (yy.astype(int) % 3 == 0))
    return amp * (0.2 + 0.8 * dots) * support, support


# (generator, amplitude) per disease, in hierarchy order
LESIONS = (
    (_stripes, 0.30),   # Atelectasis
    (_dome, 0.30),      # Cardiomegaly
    (_plateau, 0.25),   # Effusion
    (_speckle, 0.35),   # Infiltration
    (_disc, 0.30),      # Mass
    (_nodule, 0.45),    # Nodule
    (_ring, 0.30),      # Pneumonia
    (_lattice, 0.35),   # Pneumothorax
)

BAND_LEVELS = (0.10, 0.25, 0.18)
# per-image exposure: global gain and offset, so mean brightness alone does not reveal a lesion
EXPOSURE_GAIN = (0.7, 1.3)
EXPOSURE_SHIFT = (0.0, 0.0)


def _bands(size: int) -> list[tuple[int, int]]:
    edges = [round(size * k / 3) for k in range(4)]
    return [(edges[k], edges[k + 1]) for k in range(3)]


def _background(rng, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size))
    # body-part bands with soft edges
    for (lo, hi), level in zip(_bands(size), BAND_LEVELS):
        xc = np.arange(size) + 0.5
        profile = 1.0 / (1.0 + np.exp(-(xc - lo) / 1.5)) - 1.0 / (1.0 + np.exp(-(xc - hi) / 1.5))
        img += level * profile[None, :]
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 2.0, size=2)
        img += 0.03 * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return img * rng.uniform(*EXPOSURE_GAIN) + rng.uniform(*EXPOSURE_SHIFT)


def render(spec: DatasetSpec, image_id: int, label: int, part: int, hierarchy: DiseaseHierarchy):
    """Pixels (already 16-bit quantized), lesion layer and box for one image."""
    rng = np.random.default_rng([spec.seed, image_id])
    size = spec.size
    img = _background(rng, size)
    lesion = np.zeros((size, size))
    box = None
    if label != NORMAL:
        gen, amp = LESIONS[label]
        patch, support = gen(rng, amp * rng.uniform(0.85, 1.15))
        r = patch.shape[0] // 2
        lo, hi = _bands(size)[hierarchy.part_of(label)]
        cx = int(rng.integers(max(lo, r), max(max(lo, r) + 1, min(hi, size - r - 1))))
        cy = int(rng.integers(r + 1, size - r - 1))
        lesion[cy - r:cy + r + 1, cx - r:cx + r + 1] = patch
        ys, xs = np.nonzero(support)
        box = BoundingBox(int(cx - r + xs.min()), int(cy - r + ys.min()),
                          int(cx - r + xs.max() + 1), int(cy - r + ys.max() + 1))
    img = img + lesion + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    q = np.round(np.clip(img, 0.0, 1.0) * PGM_MAX).astype(np.uint16)
    return q, lesion, box


def write_pgm(path, q: np.ndarray, comment: str | None = None) -> bytes:
    h, w = q.shape
    note = "".join(f"# {line}\n" for line in comment.splitlines()) if comment else ""
    blob = f"P5\n{note}{w} {h}\n{PGM_MAX}\n".encode() + q.astype(">u2").tobytes()
    Path(path).write_bytes(blob)
    return blob


def parse_pgm(blob: bytes) -> np.ndarray:
    """Binary (P5) graymap -> floats in [0, 1]."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b"#"):
            if blob[pos:pos + 1] == b"#":
                end = blob.find(b"\n", pos)
                pos = len(blob) if end < 0 else end
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise DataError("not a binary PGM")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise DataError(f"bad PGM header: {exc}") from exc
    # exactly one whitespace byte separates the header from the raster
    data = blob[pos + 1:]
    depth = 2 if maxval > 255 else 1
    if len(data) != w * h * depth:
        raise DataError("PGM payload has the wrong size")
    arr = np.frombuffer(data, dtype=">u2" if depth == 2 else np.uint8).reshape(h, w)
    return arr.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


@dataclass
class Dataset:
    """Loaded dataset. Pixel data is read lazily, in manifest order."""

    root: Path
    spec: DatasetSpec
    entries: list[dict]
    splits: dict[str, list[int]]
    hierarchy: DiseaseHierarchy
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {e["id"]: e for e in self.entries}

    @property
    def n_classes(self) -> int:
        return self.hierarchy.n_diseases

    def entry(self, image_id: int) -> dict:
        return self._by_id[image_id]

    def _pixels(self, e: dict) -> np.ndarray:
        if e["id"] not in self._cache:
            blob = _read_verified(self.root, e)
            self._cache[e["id"]] = parse_pgm(blob)
        return self._cache[e["id"]]

    def image(self, image_id: int) -> LabeledImage:
        e = self.entry(image_id)
        box = BoundingBox(*e["box"]) if e.get("box") is not None else None
        return LabeledImage(e["id"], self._pixels(e), e["label"], e["body_part"], box, e["annotated"], e["split"])

    def iter_images(self, split: str | None = None) -> Iterator[LabeledImage]:
        wanted = None if split is None else set(self.splits[split])
        for e in self.entries:
            if wanted is None or e["id"] in wanted:
                yield self.image(e["id"])

    def images(self, split: str) -> list[LabeledImage]:
        return list(self.iter_images(split))


def _read_verified(root: Path, e: dict) -> bytes:
    path = root / e["file"]
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise MissingFileError(f"image file missing: {e['file']}") from exc
    if hashlib.sha256(blob).hexdigest() != e["sha256"]:
        raise ChecksumError(f"checksum mismatch for {e['file']}")
    return blob


def assign_labels(spec: DatasetSpec):
    """Labels, annotated flags and split names, ordered by id.

    Splits occupy disjoint, contiguous id ranges in the order of ``SPLITS``.
    """
    rng = np.random.default_rng([spec.seed, 2**31])
    counts = spec.disease_counts()
    labels = np.array([NORMAL] * spec.n_normal + [d for d, c in enumerate(counts) for _ in range(c)])
    labels = labels[rng.permutation(labels.size)]
    diseased = np.flatnonzero(labels != NORMAL)
    ann_idx = np.sort(rng.choice(diseased, size=spec.n_annotated, replace=False)) if spec.n_annotated else np.array([], int)
    is_ann = np.zeros(labels.size, bool)
    is_ann[ann_idx] = True
    ann, unann = labels[is_ann], labels[~is_ann]
    n_at = int(round(ann.size * spec.annotated_split[0]))
    m = unann.size
    n_tr = int(round(m * spec.unannotated_split[0]))
    n_va = int(round(m * spec.unannotated_split[1]))
    split_sizes = [n_at, ann.size - n_at, n_tr, n_va, m - n_tr - n_va]
    ordered = np.concatenate([ann, unann])
    annotated = np.concatenate([np.ones(ann.size, bool), np.zeros(m, bool)])
    split_names = [name for name, k in zip(SPLITS, split_sizes) for _ in range(k)]
    return ordered, annotated, split_names


def generate(spec: DatasetSpec, out_dir, hierarchy: DiseaseHierarchy | None = None, threads: int = 1) -> Dataset:
    """Render every image and write the dataset; returns it loaded."""
    hierarchy = hierarchy or DiseaseHierarchy.synthetic()
    if hierarchy.n_diseases != len(LESIONS):
        raise ValueError(f"the phantom generator needs a hierarchy with {len(LESIONS)} diseases")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    labels, annotated, split_names = assign_labels(spec)

    def one(i: int) -> dict:
        label = int(labels[i])
        if label == NORMAL:
            part = int(np.random.default_rng([spec.seed, i, 1]).integers(len(hierarchy.body_parts)))
        else:
            part = hierarchy.part_of(label)
        q, _, box = render(spec, i, label, part, hierarchy)
        rel = f"images/{i:06d}.pgm"
        try:
            blob = write_pgm(out / rel, q)
        except OSError as exc:
            raise DataError(f"cannot write {rel}: {exc}") from exc
        return {"id": i, "file": rel, "label": label, "body_part": part,
                "box": box.to_list() if box is not None else None,
                "annotated": bool(annotated[i]), "split": split_names[i],
                "sha256": hashlib.sha256(blob).hexdigest()}

    ids = range(spec.n_images)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(one, ids))
    else:
        entries = [one(i) for i in ids]
    splits = {name: [e["id"] for e in entries if e["split"] == name] for name in SPLITS}
    manifest = {
        "meta": {"artifact_version": __version__, "seed": spec.seed, "config_hash": spec.digest()},
        "spec": spec.to_dict(),
        "hierarchy": hierarchy.to_dict(),
        "splits": splits,
        "entries": entries,
    }
    try:
        (out / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write manifest: {exc}") from exc
    return load(out / MANIFEST)


def load(manifest_path) -> Dataset:
    """Read a manifest and verify every image checksum before returning anything."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise MissingFileError(f"manifest missing: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    root = path.parent
    try:
        entries = manifest["entries"]
        spec = DatasetSpec.from_dict(manifest["spec"])
        splits = {k: list(v) for k, v in manifest["splits"].items()}
        hierarchy = DiseaseHierarchy.from_dict(manifest["hierarchy"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    seen: set[int] = set()
    for name, ids in splits.items():
        overlap = seen.intersection(ids)
        if overlap:
            raise DataError(f"split {name} shares ids with another split: {sorted(overlap)[:5]}")
        seen.update(ids)
    if seen != {e["id"] for e in entries}:
        raise DataError("splits do not partition the manifest entries")
    cache = {}
    for e in entries:
        cache[e["id"]] = parse_pgm(_read_verified(root, e))
    return Dataset(root, spec, entries, splits, hierarchy, manifest.get("meta", {}), cache)
