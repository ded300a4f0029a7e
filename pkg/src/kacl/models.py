"""Image encoder, radiomic encoder, the two projectors and the classifier head.

Parameters live in flat ``{name: Tensor}`` dicts so the checkpoint layout is
just the names: ``fi.stage{1..4}.{w,b}``, ``fr.l{1..3}.{w,b}``,
``gi.l{1,2}.{w,b}``, ``gr.l{1,2}.{w,b}``, ``head.{w,b}``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from kacl import __version__
from kacl.tensor import (
    ConfigurationError,
    Tensor,
    conv2d,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    sigmoid,
    tensor_from_bytes,
    tensor_to_bytes,
)

MIN_IMAGE_SIZE = 16
CHECKPOINT_MAGIC = b"KACLCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class ImageEncoder:
    """Four conv(3x3, pad 1) -> relu -> max_pool(2) stages, then global average pooling.

    The stage-4 activations before the last pool are what Grad-CAM differentiates against.
    """

    def __init__(self, widths=(8, 16, 32, 64), in_channels: int = 1, rng=None):
        if len(widths) != 4:
            raise ConfigurationError("image encoder needs exactly four stage widths")
        rng = np.random.default_rng(0) if rng is None else rng
        self.widths = tuple(int(w) for w in widths)
        self.params: dict[str, Tensor] = {}
        c = in_channels
        for k, f in enumerate(self.widths, start=1):
            self.params[f"fi.stage{k}.w"] = _param(glorot_uniform(rng, (f, c, 3, 3), c * 9, f * 9))
            self.params[f"fi.stage{k}.b"] = _param(np.zeros(f))
            c = f

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """x: [N,1,H,W] -> (y_i [N,D], stage4 [N,C4,H/8,W/8])"""
        h, w = x.shape[-2:]
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ConfigurationError(f"image {h}x{w} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
        a = x
        for k in (1, 2, 3):
            a = max_pool2d(relu(conv2d(a, self.params[f"fi.stage{k}.w"], self.params[f"fi.stage{k}.b"], 1, 1)), 2)
        stage4 = relu(conv2d(a, self.params["fi.stage4.w"], self.params["fi.stage4.b"], 1, 1))
        y = global_avg_pool(max_pool2d(stage4, 2))
        return y, stage4


class MLP:
    """Affine layers with relu between them (none after the last)."""

    def __init__(self, prefix: str, sizes, rng):
        self.prefix = prefix
        self.sizes = tuple(int(s) for s in sizes)
        self.params: dict[str, Tensor] = {}
        for k, (fi, fo) in enumerate(zip(self.sizes[:-1], self.sizes[1:]), start=1):
            self.params[f"{prefix}.l{k}.w"] = _param(glorot_uniform(rng, (fo, fi), fi, fo))
            self.params[f"{prefix}.l{k}.b"] = _param(np.zeros(fo))

    def forward(self, x: Tensor) -> Tensor:
        n = len(self.sizes) - 1
        for k in range(1, n + 1):
            x = linear(x, self.params[f"{self.prefix}.l{k}.w"], self.params[f"{self.prefix}.l{k}.b"])
            if k < n:
                x = relu(x)
        return x


class RadiomicEncoder(MLP):
    def __init__(self, n_features: int = 33, hidden: int = 64, out_dim: int = 64, rng=None):
        super().__init__("fr", (n_features, hidden, hidden, out_dim), rng if rng is not None else np.random.default_rng(1))

    def forward(self, r: Tensor) -> Tensor:
        bad = ~np.isfinite(r.data)
        if bad.any():
            idx = int(np.argwhere(bad)[0][-1])
            raise ValueError(f"non-finite radiomic feature at index {idx}")
        return super().forward(r)


class Projector(MLP):
    def __init__(self, prefix: str, in_dim: int = 64, out_dim: int = 32, rng=None):
        super().__init__(prefix, (in_dim, in_dim, out_dim), rng if rng is not None else np.random.default_rng(2))


class ClassifierHead:
    def __init__(self, in_dim: int = 64, n_classes: int = 8, rng=None, prior: float = 0.01):
        rng = np.random.default_rng(3) if rng is None else rng
        if not 0.0 < prior < 1.0:
            raise ConfigurationError("head prior must lie in (0, 1)")
        # bias starts at the log-odds of a rare positive, so the first updates do not
        # push every encoder unit negative to suppress the majority of negative cells
        self.params = {
            "head.w": _param(glorot_uniform(rng, (n_classes, in_dim), in_dim, n_classes)),
            "head.b": _param(np.full(n_classes, -np.log((1.0 - prior) / prior))),
        }

    @property
    def n_classes(self) -> int:
        return self.params["head.w"].shape[0]

    def logits(self, y: Tensor) -> Tensor:
        return linear(y, self.params["head.w"], self.params["head.b"])

    def forward(self, y: Tensor) -> Tensor:
        return sigmoid(self.logits(y))


class KACLModel:
    """All five networks. ``radiomic`` parts are optional so test-time models carry f_i + head only."""

    def __init__(self, n_classes: int = 8, widths=(8, 16, 32, 64), n_features: int = 33,
                 proj_dim: int = 32, seed: int = 0, with_radiomic: bool = True, head_prior: float = 0.01):
        streams = [np.random.default_rng([seed, k]) for k in range(5)]
        self.config = {
            "n_classes": int(n_classes), "widths": [int(w) for w in widths],
            "n_features": int(n_features), "proj_dim": int(proj_dim),
        }
        self.encoder = ImageEncoder(widths, rng=streams[0])
        d = self.encoder.out_dim
        self.head = ClassifierHead(d, n_classes, rng=streams[1], prior=head_prior)
        self.radiomic_encoder = self.proj_image = self.proj_radiomic = None
        if with_radiomic:
            self.radiomic_encoder = RadiomicEncoder(n_features, d, d, rng=streams[2])
            self.proj_image = Projector("gi", d, proj_dim, rng=streams[3])
            self.proj_radiomic = Projector("gr", d, proj_dim, rng=streams[4])

    @property
    def has_radiomic(self) -> bool:
        return self.radiomic_encoder is not None

    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out.update(self.head.params)
        if self.has_radiomic:
            out.update(self.radiomic_encoder.params)
            out.update(self.proj_image.params)
            out.update(self.proj_radiomic.params)
        return out

    def eval_params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out.update(self.head.params)
        return out

    def zero_grad(self):
        for p in self.params().values():
            p.grad = None

    # single-sample API ---------------------------------------------------
    def encode_image(self, image) -> tuple[Tensor, Tensor]:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(1, *x.shape)
        y, stage4 = self.encoder.forward(x)
        return y.reshape(y.shape[1]), stage4.reshape(stage4.shape[1:])

    def encode_radiomics(self, r) -> Tensor:
        r = r if isinstance(r, Tensor) else Tensor(r)
        return self.radiomic_encoder.forward(r)

    def project(self, y: Tensor, which: str) -> Tensor:
        if which == "image":
            return self.proj_image.forward(y)
        if which == "radiomic":
            return self.proj_radiomic.forward(y)
        raise ValueError(f"unknown projector {which!r}")

    def classify(self, y: Tensor) -> Tensor:
        return self.head.forward(y)


# checkpoints --------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor], meta: dict) -> str:
    """Write a checkpoint and return its sha256 hex digest (used as the checkpoint id).

    Layout: magic, u32 version, u32 meta length, meta JSON, u32 count,
    per tensor (u16 name length, name, tensor bytes), trailing sha256 of all
    preceding bytes.
    """
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(tensor_to_bytes(params[name]))
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)
    return digest.hex()


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < len(CHECKPOINT_MAGIC) + 8 + 32 or not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or truncated")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", body, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            t, off = tensor_from_bytes(body, off)
            tensors[name] = t.data
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed tensor table: {exc}") from exc
    return tensors, meta, digest.hex()


def model_meta(model: KACLModel, **extra) -> dict:
    meta = dict(model.config)
    meta["artifact_version"] = __version__
    meta.update(extra)
    return meta


def save_model(path, model: KACLModel, eval_only: bool = False, **meta) -> str:
    params = model.eval_params() if eval_only else model.params()
    return save_checkpoint(path, params, model_meta(model, kind="eval" if eval_only else "train", **meta))


def load_model(path) -> tuple[KACLModel, dict, str]:
    """Rebuild a model from a checkpoint. Radiomic networks are built only if present."""
    tensors, meta, digest = read_checkpoint(path)
    with_radiomic = any(k.startswith("fr.") for k in tensors)
    try:
        model = KACLModel(meta["n_classes"], meta["widths"], meta["n_features"], meta["proj_dim"],
                          with_radiomic=with_radiomic)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata {exc}") from exc
    params = model.params()
    missing = set(params) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    for name, p in params.items():
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.shape}")
        p.data = tensors[name].copy()
    return model, meta, digest
