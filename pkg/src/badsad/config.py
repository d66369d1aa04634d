"""Experiment configuration: an INI (or JSON) file resolved against documented defaults.

Every key has a default; the resolved mapping is what gets written into run
manifests, so a run can be audited without the original file.  Synthetic
experiments use their own defaults for a few keys (see ``SYNTH_DEFAULTS``).
"""

from __future__ import annotations

import configparser
import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .datasets import SplitSizes, SyntheticSpec
from .errors import ConfigurationError, DataError
from .losses import LossWeights
from .trigger import KINDS, PoisonSpec, default_square_size
from .training import MODES, BatchSizes, TrainConfig

DATA_ROOT_ENV = "BADSAD_DATA_ROOT"
DATASETS = ("mnist", "fashion", "cifar10", "synth")

DEFAULTS: dict[str, dict] = {
    "data": {
        "dataset": "mnist",
        "root": "",  # empty: $BADSAD_DATA_ROOT/<dataset>, else ./data/<dataset>
        "normal_class": 0,
        "split_seed": 0,
        "unlabeled": 4000,
        "labeled_normal": 500,
        "labeled_abnormal": 500,
        "val_normal": 200,
        "val_abnormal": 180,
        "test_normal": 760,
        "test_abnormal": 430,
        "asr_abnormal": 500,
        "synth_n_per_group": 500,
        "synth_spread": 0.05,
        "synth_normal_center": "0.25,0.75",
        "synth_abnormal_center": "0.85,0.5",
    },
    "trigger": {
        "kind": "corner4",
        "square_size": 0,  # 0: 3 px at 28x28, 4 px at 32x32, 1 slot for vectors
        "mu": 1.0,
        "count": 500,
        "seed": 0,
    },
    "pretrain": {
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 64,
        "weight_decay": 1e-6,
        "seed": 0,
        "hidden": 24,  # dense encoder only (synth)
        "rep_dim": 16,  # dense encoder only (synth)
    },
    "train": {
        "mode": "badsad",
        "epochs": 50,
        "lr": 1e-3,
        "batch_unlabeled": 64,
        "batch_labeled_normal": 16,
        "batch_labeled_abnormal": 16,
        "batch_poisoned": 16,
        "eta": 1.0,
        "alpha": 5.0,
        "beta": 1.0,
        "margin": 2.0,
        "eps_inv": 1e-6,
        "lambda_wd": 1e-6,
        "pairing": "mean",
        "seed": 0,
        "dtype": "float32",
        "zero_guard": 0.1,
    },
    "eval": {
        "criterion": "balanced_accuracy",
        "ratio_max": 2.0,
        "ratio_step": 0.1,
        "n_per_group": 100,
        "projection_seed": 0,
    },
    "output": {
        "dir": "runs/experiment",
    },
}

SYNTH_DEFAULTS: dict[str, dict] = {
    "pretrain": {"epochs": 20},
    "train": {"epochs": 100, "alpha": 10.0, "beta": 0.3},
}


def _coerce(section: str, key: str, value):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"[{section}] {key}: cannot read {value!r} as {type(default).__name__}") from None
    return str(value)


def _read_file(path: Path) -> dict[str, dict]:
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise ConfigurationError(f"{path}: expected an object of sections")
        return raw
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def resolve(raw: dict[str, dict] | None = None, overrides: dict[str, dict] | None = None) -> dict[str, dict]:
    """Merge defaults, dataset-specific defaults, file values and overrides; validate keys."""
    given: dict[str, dict] = {}
    for layer in (raw or {}), (overrides or {}):
        for section, values in layer.items():
            if section not in DEFAULTS:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, value in values.items():
                if key not in DEFAULTS[section]:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                given.setdefault(section, {})[key] = value

    dataset = str(given.get("data", {}).get("dataset", DEFAULTS["data"]["dataset"]))
    if dataset not in DATASETS:
        raise ConfigurationError(f"unknown dataset {dataset!r}; expected one of {DATASETS}")
    cfg = copy.deepcopy(DEFAULTS)
    if dataset == "synth":
        for section, values in SYNTH_DEFAULTS.items():
            cfg[section].update(values)
    for section, values in given.items():
        for key, value in values.items():
            cfg[section][key] = _coerce(section, key, value)
    _validate(cfg)
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, dict] | None = None) -> dict[str, dict]:
    raw = _read_file(Path(path)) if path is not None else {}
    return resolve(raw, overrides)


def _validate(cfg: dict[str, dict]) -> None:
    d = cfg["data"]
    if d["dataset"] != "synth" and not 0 <= d["normal_class"] <= 9:
        raise ConfigurationError(f"normal_class must lie in 0..9, got {d['normal_class']}")
    if cfg["trigger"]["kind"] not in KINDS:
        raise ConfigurationError(f"unknown trigger kind {cfg['trigger']['kind']!r}")
    if cfg["train"]["mode"] not in MODES:
        raise ConfigurationError(f"unknown training mode {cfg['train']['mode']!r}; expected one of {MODES}")
    if cfg["train"]["dtype"] not in ("float32", "float64"):
        raise ConfigurationError("train.dtype must be float32 or float64")
    if cfg["eval"]["criterion"] not in ("balanced_accuracy", "f1"):
        raise ConfigurationError("eval.criterion must be balanced_accuracy or f1")
    if cfg["eval"]["ratio_step"] <= 0 or cfg["eval"]["ratio_max"] < 0:
        raise ConfigurationError("eval.ratio_step must be > 0 and eval.ratio_max >= 0")
    if cfg["eval"]["n_per_group"] < 1:
        raise ConfigurationError("eval.n_per_group must be >= 1")
    for key in ("epochs", "batch_size"):
        if cfg["pretrain"][key] < (1 if key == "batch_size" else 0):
            raise ConfigurationError(f"pretrain.{key} out of range: {cfg['pretrain'][key]}")
    # construct the typed views once so their own checks run now
    loss_weights(cfg)
    train_config(cfg)
    if d["dataset"] == "synth":
        synth_spec(cfg)


# -- typed views -------------------------------------------------------------------------


def data_root(cfg: dict) -> Path:
    d = cfg["data"]
    if d["root"]:
        return Path(d["root"])
    base = os.environ.get(DATA_ROOT_ENV)
    return Path(base) / d["dataset"] if base else Path("data") / d["dataset"]


def split_sizes(cfg: dict) -> SplitSizes:
    d = cfg["data"]
    if d["dataset"] == "synth":
        return SplitSizes(*([d["synth_n_per_group"]] * 8))
    return SplitSizes(**{k: d[k] for k in SplitSizes.__dataclass_fields__})


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise ConfigurationError(f"cannot read coordinates from {text!r}") from None


def synth_spec(cfg: dict) -> SyntheticSpec:
    d = cfg["data"]
    normal, abnormal = _floats(d["synth_normal_center"]), _floats(d["synth_abnormal_center"])
    if len(normal) != len(abnormal):
        raise ConfigurationError("synthetic centers must have the same number of coordinates")
    return SyntheticSpec(
        n_per_group=d["synth_n_per_group"],
        dims=len(normal),
        normal_center=normal,
        abnormal_center=abnormal,
        spread=d["synth_spread"],
        seed=d["split_seed"],
    )


def poison_spec(cfg: dict, sample_shape: tuple[int, ...]) -> PoisonSpec:
    t = cfg["trigger"]
    size = t["square_size"] or default_square_size(tuple(sample_shape))
    return PoisonSpec(kind=t["kind"], square_size=size, mu=t["mu"], count=t["count"], seed=t["seed"])


def loss_weights(cfg: dict) -> LossWeights:
    t = cfg["train"]
    return LossWeights(
        eta=t["eta"],
        alpha=t["alpha"],
        beta=t["beta"],
        margin=t["margin"],
        eps_inv=t["eps_inv"],
        lambda_wd=t["lambda_wd"],
        pairing=t["pairing"],
    )


def train_config(cfg: dict, poison: PoisonSpec | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        mode=t["mode"],
        epochs=t["epochs"],
        lr=t["lr"],
        batch=BatchSizes(t["batch_unlabeled"], t["batch_labeled_normal"], t["batch_labeled_abnormal"], t["batch_poisoned"]),
        weights=loss_weights(cfg),
        poison=poison or PoisonSpec(),
        seed=t["seed"],
        dtype=t["dtype"],
        zero_guard=t["zero_guard"],
    )


def ratios(cfg: dict) -> tuple[float, ...]:
    e = cfg["eval"]
    n = int(round(e["ratio_max"] / e["ratio_step"]))
    return tuple(round(i * e["ratio_step"], 10) for i in range(n + 1))


def to_ini(cfg: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.items():
        parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


@dataclass(frozen=True)
class Override:
    """A ``section.key=value`` command-line override."""

    section: str
    key: str
    value: str

    @classmethod
    def parse(cls, text: str) -> "Override":
        if "=" not in text or "." not in text.split("=", 1)[0]:
            raise ConfigurationError(f"override must look like section.key=value, got {text!r}")
        lhs, value = text.split("=", 1)
        section, key = lhs.split(".", 1)
        return cls(section.strip(), key.strip(), value.strip())


def merge_overrides(items) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for item in items:
        out.setdefault(item.section, {})[item.key] = item.value
    return out
