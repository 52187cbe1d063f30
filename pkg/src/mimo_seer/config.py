"""JSON run configuration shared by every CLI command.

An empty document is a valid toy run: every field has a default and unknown
keys are rejected. The config hash is a content digest of the canonical JSON
form (output directory excluded) and is stamped into every artifact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .data import SpriteWorldConfig
from .model import ConfigError, ModelConfig
from .training import TrainHyper

__all__ = ["DataConfig", "EvalConfig", "RunConfig", "load_run_config", "apply_override"]


def _reject_unknown(cls, d: dict, section: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


@dataclass(frozen=True)
class DataConfig:
    path: Optional[str] = None  # VSEQ file; when unset, sequences come from ``generator``
    generator: SpriteWorldConfig = field(default_factory=SpriteWorldConfig)
    idx_images: Optional[str] = None
    train_frac: float = 0.9

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        _reject_unknown(cls, d, "data")
        d = dict(d)
        if "generator" in d:
            try:
                d["generator"] = SpriteWorldConfig.from_dict(d["generator"])
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**d)

    def to_dict(self) -> dict:
        return {"path": self.path, "generator": self.generator.to_dict(), "idx_images": self.idx_images,
                "train_frac": self.train_frac}


@dataclass(frozen=True)
class EvalConfig:
    csi_thresholds: Tuple[float, ...] = (0.5,)
    max_sequences: int = 256
    batch_size: int = 64

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        _reject_unknown(cls, d, "eval")
        d = dict(d)
        if "csi_thresholds" in d:
            d["csi_thresholds"] = tuple(float(t) for t in d["csi_thresholds"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {"csi_thresholds": list(self.csi_thresholds), "max_sequences": self.max_sequences,
                "batch_size": self.batch_size}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on. ``seed`` drives initialization, batch order and the split."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(cls, d, "run config")
        train = dict(d.get("train", {}))
        if "seed" in train:
            raise ConfigError("set the seed at the top level, not inside 'train'")
        _reject_unknown(TrainHyper, train, "train")
        try:
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainHyper(**train),
                data=DataConfig.from_dict(d.get("data", {})),
                eval=EvalConfig.from_dict(d.get("eval", {})),
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "out")),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train.pop("seed")
        return {
            "model": self.model.to_dict(),
            "train": train,
            "data": self.data.to_dict(),
            "eval": self.eval.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def hyper(self) -> TrainHyper:
        """Training hyperparameters with the run seed filled in."""
        return replace(self.train, seed=self.seed)

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("out_dir")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``section.key=value`` to a config document; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"override {assignment!r} has an empty key")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} descends into a non-object")
    node[keys[-1]] = value
    return doc
