"""Layered experiment configuration.

A config file is one JSON document with two layers: ``defaults`` holds the
hyper-parameters used with full-size backbones, ``overrides`` holds the
desk-scale changes.  The layers are deep-merged (overrides win) into an
:class:`ExperimentConfig`.
"""

import copy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from asymml.dataset import SyntheticConfig
from asymml.errors import ConfigurationError
from asymml.experiment import DESK_LR_SCALE, HIDDEN
from asymml.io import canonical_json, digest, read_json
from asymml.losses import LossConfig
from asymml.mining import MiningConfig
from asymml.trainer import FULL_EPOCHS, DESK_EPOCHS, TrainConfig

WHITENING_CHOICES = ("auto", "none", "student", "teacher")

FULL_SCALE_DEFAULTS = {
    "train": {
        "loss": {"kind": "contrastive_plus", "margin": None, "alpha": 1.0, "beta": 1.0,
                 "rkd": {"distance_weight": 1.0, "angle_weight": 2.0, "huber_delta": 1.0}},
        "learning_rate": None,
        "lr_scale": 1.0,
        "lr_decay": 0.99,
        "weight_decay": 1e-6,
        "epochs": {m.value: n for m, n in FULL_EPOCHS.items()},
        "tuples_per_epoch": 2000,
        "batch_tuples": 10,
        "num_positives": 1,
        "num_negatives": 5,
        "mining": {"pool_size": 22000},
    },
}

DESK_OVERRIDES = {
    "data": asdict(SyntheticConfig()),
    "model": {"hidden": list(HIDDEN)},
    "train": {
        "loss": {"kind": "regression"},
        "lr_scale": DESK_LR_SCALE,
        "epochs": {m.value: n for m, n in DESK_EPOCHS.items()},
        "tuples_per_epoch": 200,
        "mining": {"pool_size": 1000},
    },
    "eval": {"protocols": ["symmetric", "asymmetric"], "whitening": "auto"},
    "paths": {"dataset": "data", "out": "out"},
    "seed": 0,
}


def default_document():
    return {"defaults": copy.deepcopy(FULL_SCALE_DEFAULTS), "overrides": copy.deepcopy(DESK_OVERRIDES)}


def deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _section(cls, values, name):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad {name} section: {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(f"bad {name} section: {exc}") from None


@dataclass
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple = HIDDEN
    protocols: tuple = ("symmetric", "asymmetric")
    whitening: str = "auto"
    dataset_dir: str = "data"
    out_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        """Build from a layered document or an already merged one."""
        if "defaults" in doc or "overrides" in doc:
            unknown = set(doc) - {"defaults", "overrides"}
            if unknown:
                raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")
            merged = deep_merge(doc.get("defaults", {}), doc.get("overrides", {}))
        else:
            merged = copy.deepcopy(doc)
        unknown = set(merged) - {"data", "model", "train", "eval", "paths", "seed"}
        if unknown:
            raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
        seed = int(merged.get("seed", 0))

        train = dict(merged.get("train", {}))
        loss = _section(LossConfig, train.pop("loss", {}), "train.loss")
        mining = _section(MiningConfig, {**train.pop("mining", {}), "seed": seed}, "train.mining")
        train = _section(TrainConfig, {**train, "loss": loss, "mining": mining, "seed": seed},
                         "train")
        data = _section(SyntheticConfig, {**merged.get("data", {}), "seed": seed}, "data")

        ev = merged.get("eval", {})
        protocols = tuple(ev.get("protocols", ("symmetric", "asymmetric")))
        whitening = ev.get("whitening", "auto")
        paths = merged.get("paths", {})
        dataset_dir = str(paths.get("dataset", "data"))
        out_dir = str(paths.get("out", "out"))
        if base_dir is not None:
            dataset_dir = str(Path(base_dir) / dataset_dir)
            out_dir = str(Path(base_dir) / out_dir)
        cfg = cls(data, train, tuple(merged.get("model", {}).get("hidden", HIDDEN)),
                  protocols, whitening, dataset_dir, out_dir, seed)
        cfg.validate()
        return cfg

    def validate(self):
        self.data.validate()
        self.train.validate()
        for p in self.protocols:
            if p not in ("symmetric", "asymmetric"):
                raise ConfigurationError(f"unknown protocol {p!r}")
        if self.whitening not in WHITENING_CHOICES:
            raise ConfigurationError(
                f"whitening must be one of {WHITENING_CHOICES}, got {self.whitening!r}")
        if any(int(h) < 1 for h in self.hidden):
            raise ConfigurationError("hidden layer sizes must be positive")
        if self.train.mining.pool_size > self.data.train_size:
            raise ConfigurationError(
                f"mining pool_size ({self.train.mining.pool_size}) exceeds "
                f"train_size ({self.data.train_size})")

    def with_seed(self, seed):
        """Copy with every seed (data, student, training, mining) set to ``seed``."""
        seed = int(seed)
        train = replace(self.train, seed=seed, mining=replace(self.train.mining, seed=seed))
        return replace(self, data=replace(self.data, seed=seed), train=train, seed=seed)

    def to_dict(self):
        """Merged form; ``from_dict(to_dict())`` reproduces the config."""
        train = self.train.to_dict()
        train.pop("seed")
        train["mining"].pop("seed")
        data = asdict(self.data)
        data.pop("seed")
        return {
            "data": data,
            "model": {"hidden": [int(h) for h in self.hidden]},
            "train": train,
            "eval": {"protocols": list(self.protocols), "whitening": self.whitening},
            "paths": {"dataset": self.dataset_dir, "out": self.out_dir},
            "seed": self.seed,
        }

    def digest(self):
        """Hash of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return digest(d)

    def to_json(self):
        return canonical_json(self.to_dict())


def load_config(path=None):
    if path is None:
        return ExperimentConfig.from_dict(default_document())
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        doc = read_json(path)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.parent)
