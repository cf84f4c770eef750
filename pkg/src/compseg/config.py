"""Experiment configuration: dataclasses plus TOML/JSON loading with field diagnostics."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import ModelConfig
from .types import CompsegError

CONDITIONS = ("baseline", "complementary", "fully-supervised")

# short names usable in ablation configs and on the command line
CONDITION_ALIASES: dict[str, tuple[str, str | None]] = {
    "baseline": ("baseline", None),
    "full": ("fully-supervised", None),
    "fully-supervised": ("fully-supervised", None),
    "complementary": ("complementary", None),
    "q1": ("complementary", "mnist-q1"),
    "q2": ("complementary", "mnist-q2"),
    "liver": ("complementary", "liver"),
}

TRAINING_PRESETS = {
    "desk": {"learning_rate": 1e-3, "weight_decay": 1e-5, "batch_size": 32, "max_epochs": 200, "patience": 20},
    "liver-model": {"learning_rate": 1e-5, "weight_decay": 1e-5, "batch_size": 128, "patience": 50},
}


class ConfigError(CompsegError):
    pass


def default_data_dir() -> Path:
    env = os.environ.get("COMPSEG_DATA_DIR")
    return Path(env) if env else Path.home() / ".cache" / "compseg"


@dataclass
class DatasetConfig:
    kind: str = "mnist-seg"
    # mnist-seg
    n: int = 1000
    supervised_fraction: float = 0.1
    eval_fraction: float = 0.2
    sampling_mode: str = "per-pixel"
    data_dir: str | None = None
    offline_fallback: bool = True
    data_seed: int | None = None
    # synthslide
    difficulty: str = "easy"
    slide_size: int = 512
    patch_size: int = 32
    stride: int = 2
    annotated_cases: int = 6
    complementary_cases: int = 14
    validation_cases: int = 4
    test_cases: int = 16
    annotation_coverage: float = 0.5
    color_augment: bool = True
    geometric_augment: bool = True
    corpus_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("mnist-seg", "synthslide"):
            raise ConfigError(f"dataset.kind: expected 'mnist-seg' or 'synthslide', got {self.kind!r}")
        if self.sampling_mode not in ("per-pixel", "per-image"):
            raise ConfigError(f"dataset.sampling_mode: unknown mode {self.sampling_mode!r}")
        if not 0 < self.supervised_fraction <= 1:
            raise ConfigError("dataset.supervised_fraction: must lie in (0, 1]")

    def mnist_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else default_data_dir() / "mnist"


@dataclass
class ExperimentConfig:
    seed: int = 0
    condition: str = "complementary"
    q: Any = "mnist-q1"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 0.3
    gamma: float = 2.0
    use_focal: bool = False
    class_weighting: str = "inverse-frequency"
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    max_epochs: int = 200
    patience: int = 20
    eval_every: int = 1
    dtype: str = "float32"

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition: expected one of {CONDITIONS}, got {self.condition!r}")
        if self.patience < 1:
            raise ConfigError("train.patience: must be >= 1")
        if self.eval_every < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train: eval_every, batch_size and max_epochs must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"train.dtype: expected float32 or float64, got {self.dtype!r}")
        if self.class_weighting not in ("inverse-frequency", "none"):
            raise ConfigError(f"loss.class_weighting: unknown value {self.class_weighting!r}")

    def with_condition(self, name: str) -> "ExperimentConfig":
        """Copy with an ablation condition applied (alias or plain condition name)."""
        if name in CONDITION_ALIASES:
            condition, q = CONDITION_ALIASES[name]
        elif name.startswith("complementary:"):
            condition, q = "complementary", name.split(":", 1)[1]
        else:
            raise ConfigError(f"unknown condition {name!r}; choose from {sorted(CONDITION_ALIASES)}")
        return dataclasses.replace(self, condition=condition, q=q if q is not None else self.q)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


TRAIN_KEYS = ("batch_size", "learning_rate", "weight_decay", "max_epochs", "patience", "eval_every", "dtype")
LOSS_KEYS = ("alpha", "gamma", "use_focal", "class_weighting")


def _check_type(path: str, value, expected):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if not isinstance(value, expected):
        raise ConfigError(f"{path}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")
    return value


def _build(cls, data: dict, prefix: str, skip=()):
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in hints or key in skip:
            raise ConfigError(f"{path}: unknown field")
        typ = hints[key].type
        basic = {"int": int, "float": float, "str": str, "bool": bool}.get(typ)
        if basic is not None:
            value = _check_type(path, value, basic)
        elif typ in ("int | None", "str | None") and value is not None:
            value = _check_type(path, value, int if typ.startswith("int") else str)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{prefix or 'config'}: {err}") from err


def config_from_dict(data: dict) -> tuple[ExperimentConfig, dict]:
    """Build an :class:`ExperimentConfig`; returns it with the raw ``[ablation]`` table."""
    data = dict(data)
    ablation = data.pop("ablation", {})
    top = {}
    for key in ("seed", "condition", "q"):
        if key in data:
            top[key] = data.pop(key)
    if "seed" in top:
        top["seed"] = _check_type("seed", top["seed"], int)
    if "condition" in top and top["condition"] in CONDITION_ALIASES:
        top["condition"], q = CONDITION_ALIASES[top["condition"]]
        if q is not None:
            top["q"] = q
    dataset = _build(DatasetConfig, data.pop("dataset", {}), "dataset")
    model = _build(ModelConfig, data.pop("model", {}), "model")
    loss = data.pop("loss", {})
    train = data.pop("train", {})
    if "preset" in train:
        preset = train.pop("preset")
        if preset not in TRAINING_PRESETS:
            raise ConfigError(f"train.preset: unknown preset {preset!r}")
        train = {**TRAINING_PRESETS[preset], **train}
    if data:
        raise ConfigError(f"{sorted(data)[0]}: unknown field")
    for key in loss:
        if key not in LOSS_KEYS:
            raise ConfigError(f"loss.{key}: unknown field")
    for key in train:
        if key not in TRAIN_KEYS:
            raise ConfigError(f"train.{key}: unknown field")
    flat = {**{f"loss.{k}": v for k, v in loss.items()}, **{f"train.{k}": v for k, v in train.items()}}
    fields = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for path, value in flat.items():
        name = path.split(".", 1)[1]
        basic = {"int": int, "float": float, "str": str, "bool": bool}[fields[name]]
        kwargs[name] = _check_type(path, value, basic)
    cfg = ExperimentConfig(**top, dataset=dataset, model=model, **kwargs)
    return cfg, ablation


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Read a TOML (or ``.json``) experiment config."""
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as err:
        raise ConfigError(f"{path}: {err}") from err
    try:
        return config_from_dict(data)
    except ConfigError as err:
        raise ConfigError(f"{path}: {err}") from err


def config_to_toml(cfg: ExperimentConfig, ablation: dict | None = None) -> str:
    """Serialise a config as TOML (inverse of :func:`load_config`)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    d = cfg.to_dict()
    lines = [f"seed = {cfg.seed}", f"condition = {fmt(cfg.condition)}", f"q = {fmt(cfg.q)}", ""]
    lines.append("[dataset]")
    lines += [f"{k} = {fmt(v)}" for k, v in d["dataset"].items() if v is not None]
    lines += ["", "[model]"] + [f"{k} = {fmt(v)}" for k, v in d["model"].items()]
    lines += ["", "[loss]"] + [f"{k} = {fmt(d[k])}" for k in LOSS_KEYS]
    lines += ["", "[train]"] + [f"{k} = {fmt(d[k])}" for k in TRAIN_KEYS]
    if ablation:
        lines += ["", "[ablation]"] + [f"{k} = {fmt(v)}" for k, v in ablation.items()]
    return "\n".join(lines) + "\n"
