"""Run configuration: one JSON file defines an experiment completely.

Unknown keys are hard errors. A typo in a hyperparameter name must fail
loudly instead of silently running with a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .network import ArchSpec, BitWidthSet, mlp, small_cnn

SCHEMA_VERSION = 1

MODES = ("coquant", "joint", "switchable_bn", "adabits",
         "individual", "progressive_desc", "progressive_asc", "direct")


class ConfigError(ValueError):
    pass


def _require_keys(d: dict, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


@dataclass
class OptimizerSettings:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: str = "step"  # "step": x0.1 at 50% and 75% of epochs; or "constant"

    @staticmethod
    def from_dict(d: dict) -> "OptimizerSettings":
        _require_keys(d, {"lr", "momentum", "weight_decay", "schedule"}, set(), "optimizer")
        s = OptimizerSettings(**d)
        if s.lr <= 0:
            raise ConfigError(f"optimizer.lr must be positive, got {s.lr}")
        if not 0 <= s.momentum < 1:
            raise ConfigError(f"optimizer.momentum must be in [0, 1), got {s.momentum}")
        if s.schedule not in ("step", "constant"):
            raise ConfigError(f"optimizer.schedule must be 'step' or 'constant', got {s.schedule!r}")
        return s


@dataclass
class AlphaSettings:
    init: float = 6.0
    lr: float = 0.01
    weight_decay: float = 0.0

    @staticmethod
    def from_dict(d: dict) -> "AlphaSettings":
        _require_keys(d, {"init", "lr", "weight_decay"}, set(), "alpha")
        s = AlphaSettings(**d)
        if s.init <= 0 or s.lr <= 0:
            raise ConfigError("alpha.init and alpha.lr must be positive")
        return s


@dataclass
class DatasetSpec:
    kind: str
    # synthetic_blobs
    classes: int = 0
    samples: int = 0
    dim: int = 0
    spread: float = 1.0
    seed: int = 0
    center_scale: float = 3.0
    center_offset: float = 0.0
    eval_samples: int = 0
    # idx_images
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    mean: float = 0.0
    std: float = 1.0
    # csv_table
    path: str = ""
    eval_path: str = ""

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        kind = d.get("kind")
        if kind == "synthetic_blobs":
            allowed = {"kind", "classes", "samples", "dim", "spread", "seed",
                       "center_scale", "center_offset", "eval_samples"}
            required = {"kind", "classes", "samples", "dim"}
        elif kind == "idx_images":
            allowed = {"kind", "train_images", "train_labels", "test_images",
                       "test_labels", "mean", "std", "classes"}
            required = {"kind", "train_images", "train_labels"}
        elif kind == "csv_table":
            allowed = {"kind", "path", "eval_path", "classes"}
            required = {"kind", "path", "classes"}
        else:
            raise ConfigError(f"dataset.kind must be one of synthetic_blobs, "
                              f"idx_images, csv_table; got {kind!r}")
        _require_keys(d, allowed, required, "dataset")
        spec = DatasetSpec(**d)
        if kind == "synthetic_blobs":
            if spec.eval_samples <= 0:
                spec.eval_samples = max(spec.classes, spec.samples // 4)
        return spec

    def to_dict(self) -> dict:
        if self.kind == "synthetic_blobs":
            return {"kind": self.kind, "classes": self.classes, "samples": self.samples,
                    "dim": self.dim, "spread": self.spread, "seed": self.seed,
                    "center_scale": self.center_scale, "center_offset": self.center_offset,
                    "eval_samples": self.eval_samples}
        if self.kind == "idx_images":
            return {"kind": self.kind, "train_images": self.train_images,
                    "train_labels": self.train_labels, "test_images": self.test_images,
                    "test_labels": self.test_labels, "mean": self.mean, "std": self.std,
                    "classes": self.classes}
        return {"kind": self.kind, "path": self.path, "eval_path": self.eval_path,
                "classes": self.classes}


@dataclass
class RunConfig:
    mode: str
    bits: list[int]
    dataset: DatasetSpec
    arch: dict
    lam: float = 0.1
    p1_initial: float = 0.5
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    deterministic: bool = True
    bn_momentum: float = 0.1
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    alpha: AlphaSettings = field(default_factory=AlphaSettings)

    # -- mode helpers --------------------------------------------------------

    @property
    def mode_kind(self) -> str:
        return self.mode.split(":", 1)[0]

    @property
    def mode_bit(self) -> int | None:
        """The b in individual:b / direct:b, else None."""
        if ":" in self.mode:
            return int(self.mode.split(":", 1)[1])
        return None

    def bit_set(self) -> BitWidthSet:
        return BitWidthSet(self.bits)

    def build_arch(self) -> ArchSpec:
        kind = self.arch.get("kind")
        if kind == "mlp":
            return mlp(self.arch["input_dim"], list(self.arch["hidden"]), self.arch["classes"])
        if kind == "cnn":
            return small_cnn(self.arch["in_channels"], self.arch["image_size"],
                             self.arch["classes"], self.arch.get("channels"))
        if kind == "layers":
            return ArchSpec.from_json(self.arch["layers"])
        raise ConfigError(f"arch.kind must be mlp, cnn or layers; got {kind!r}")

    # -- validation / serialization ------------------------------------------

    def validate(self) -> "RunConfig":
        kind = self.mode_kind
        if kind not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        bits = self.bit_set()
        if kind in ("individual", "direct"):
            if self.mode_bit is None:
                raise ConfigError(f"mode {kind!r} needs a bit-width suffix, e.g. '{kind}:8'")
            if kind == "individual" and self.bits != [self.mode_bit]:
                raise ConfigError(
                    f"individual:{self.mode_bit} requires bits == [{self.mode_bit}], got {self.bits}"
                )
            if kind == "direct" and self.mode_bit not in bits:
                raise ConfigError(f"direct source bit {self.mode_bit} must be in bits {self.bits}")
        if not 0.0 < self.p1_initial <= 1.0:
            raise ConfigError(f"p1_initial must be in (0, 1], got {self.p1_initial}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError(f"bn_momentum must be in (0, 1], got {self.bn_momentum}")
        self.build_arch()  # fail early on malformed arch
        return self

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        allowed = {"schema_version", "mode", "bits", "dataset", "arch", "lambda",
                   "p1_initial", "epochs", "batch_size", "seed", "deterministic",
                   "bn_momentum", "optimizer", "alpha"}
        required = {"schema_version", "mode", "bits", "dataset", "arch"}
        _require_keys(d, allowed, required, "config")
        version = d["schema_version"]
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")
        cfg = RunConfig(
            mode=d["mode"],
            bits=[int(b) for b in d["bits"]],
            dataset=DatasetSpec.from_dict(d["dataset"]),
            arch=dict(d["arch"]),
            lam=float(d.get("lambda", 0.1)),
            p1_initial=float(d.get("p1_initial", 0.5)),
            epochs=int(d.get("epochs", 30)),
            batch_size=int(d.get("batch_size", 128)),
            seed=int(d.get("seed", 0)),
            deterministic=bool(d.get("deterministic", True)),
            bn_momentum=float(d.get("bn_momentum", 0.1)),
            optimizer=OptimizerSettings.from_dict(dict(d.get("optimizer", {}))),
            alpha=AlphaSettings.from_dict(dict(d.get("alpha", {}))),
        )
        return cfg.validate()

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "bits": list(self.bits),
            "dataset": self.dataset.to_dict(),
            "arch": dict(self.arch),
            "lambda": self.lam,
            "p1_initial": self.p1_initial,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "bn_momentum": self.bn_momentum,
            "optimizer": {"lr": self.optimizer.lr, "momentum": self.optimizer.momentum,
                          "weight_decay": self.optimizer.weight_decay,
                          "schedule": self.optimizer.schedule},
            "alpha": {"init": self.alpha.init, "lr": self.alpha.lr,
                      "weight_decay": self.alpha.weight_decay},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return RunConfig.from_dict(data)

    @staticmethod
    def load(path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return RunConfig.from_json(f.read())
