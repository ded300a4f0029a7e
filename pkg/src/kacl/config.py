"""Run configuration files (JSON) and their content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from kacl.metrics import DEFAULT_IOU_THRESHOLDS
from kacl.synthcxr import DatasetSpec
from kacl.trainer import TrainConfig

# keys that only say where things go; they do not change any result
_LOCATION_KEYS = ("out",)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    """``dataset`` is either a manifest path or an inline generation spec."""

    dataset: str | DatasetSpec
    out: str = "runs/default"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    loc_thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    @property
    def manifest(self) -> Path | None:
        if isinstance(self.dataset, DatasetSpec):
            return None
        return (self.base_dir / self.dataset).resolve()

    @property
    def out_dir(self) -> Path:
        return (self.base_dir / self.out).resolve()

    def to_dict(self) -> dict:
        ds = self.dataset.to_dict() if isinstance(self.dataset, DatasetSpec) else str(self.dataset)
        return {"dataset": ds, "out": self.out, "train": self.train.to_dict(),
                "seeds": list(self.seeds), "loc_thresholds": list(self.loc_thresholds)}

    @property
    def hash(self) -> str:
        d = self.to_dict()
        for k in _LOCATION_KEYS:
            d.pop(k, None)
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {"dataset", "out", "train", "seeds", "loc_thresholds"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise ValueError("config needs a 'dataset' entry")
        ds = d["dataset"]
        ds = DatasetSpec.from_dict(ds) if isinstance(ds, dict) else str(ds)
        return cls(ds, d.get("out", "runs/default"), TrainConfig.from_dict(d.get("train", {})),
                   tuple(int(s) for s in d.get("seeds", (0, 1, 2))),
                   tuple(float(t) for t in d.get("loc_thresholds", DEFAULT_IOU_THRESHOLDS)),
                   Path(base_dir))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
