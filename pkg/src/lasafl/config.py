"""Experiment configuration: TOML document -> validated dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aggregators import AGGREGATOR_KEYS
from .attacks import ATTACK_KINDS, AttackSpec


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


# lambda_m per dataset kind; hard image tasks would use 1.0
DEFAULT_LAMBDA_M = {"synthetic": 2.0, "idx": 2.0}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    dim: int = 32
    samples_per_class: int = 200
    test_samples_per_class: int = 100
    spread: float = 0.5
    separation: float = 1.5
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "iid"
    alpha: float = 0.5


@dataclass(frozen=True)
class LocalTrainConfig:
    tau: int = 5
    eta: float = 0.1
    momentum: float = 0.9
    lr_decay: float = 0.99
    batch_size: int = 16
    clip: float = 0.0  # gradient L2 clip; 0 disables

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError("local.tau: must be >= 1")
        if not self.eta >= 0:
            raise ConfigError("local.eta: must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("local.momentum: must lie in [0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("local.lr_decay: must lie in (0, 1]")
        if self.batch_size < 1:
            raise ConfigError("local.batch_size: must be >= 1")
        if self.clip < 0:
            raise ConfigError("local.clip: must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "logreg"
    hidden: int = 32


@dataclass(frozen=True)
class AggregatorConfig:
    key: str = "lasa"
    sparsification_level: float = 0.3
    lambda_m: float | None = None
    lambda_d: float = 1.0
    f: int | None = None
    trim: int | None = None
    m: int | None = None
    clip: float = float("inf")
    tol: float = 1e-8
    max_iter: int = 200

    def params(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if k != "key" and v is not None}


@dataclass(frozen=True)
class KappaConfig:
    trials: int = 200
    n: int = 10
    f: int = 2
    attacks: tuple[str, ...] = ("lie", "signflip", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    attack: AttackSpec | None = None
    kappa: KappaConfig = field(default_factory=KappaConfig)
    n: int = 40
    h: int = 20
    attack_ratio: float = 0.25
    rounds: int = 150
    seed: int = 0
    log_gradients: bool = False
    output_dir: str = "runs"
    name: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n: must be >= 1")
        if not 1 <= self.h <= self.n:
            raise ConfigError(f"h: must satisfy 1 <= h <= n (h={self.h}, n={self.n})")
        if not 0 <= self.attack_ratio < 0.5:
            raise ConfigError(
                f"attack_ratio: {self.attack_ratio} violates 0 <= f < n/2 (need ratio < 0.5)"
            )
        if self.rounds < 0:
            raise ConfigError("rounds: must be >= 0")

    @property
    def expected_malicious(self) -> int:
        """Malicious count the server assumes per sampled round."""
        return int(self.attack_ratio * self.h)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "local": LocalTrainConfig,
    "aggregator": AggregatorConfig,
    "attack": AttackSpec,
    "kappa": KappaConfig,
}


def _coerce(path: str, value: Any, annotation: str):
    ann = annotation.replace(" ", "")
    if value == "inf" and "float" in ann:
        return float("inf")
    if ann.startswith("tuple"):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{path}: expected a list of strings")
        return tuple(value)
    if "bool" in ann:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {annotation}")


def _build(cls, section: str, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{section}.{key}" if section else key
        if key not in fields:
            raise ConfigError(f"{path}: unknown key")
        kwargs[key] = _coerce(path, value, str(fields[key].type))
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section or '<root>'}: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment document, applying defaults."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"<document>: {exc}") from None
    top = {}
    sections = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in _SECTIONS:
                raise ConfigError(f"{key}: unknown section")
            sections[key] = value
        else:
            top[key] = value

    built = {}
    for name, cls in _SECTIONS.items():
        raw = sections.get(name, {})
        if name == "attack":
            if not raw or raw.get("kind", "none") == "none":
                extra = set(raw) - {"kind"}
                if extra:
                    raise ConfigError(f"attack.{sorted(extra)[0]}: given without an attack kind")
                built[name] = None
                continue
            if raw.get("kind") not in ATTACK_KINDS:
                raise ConfigError(f"attack.kind: unknown attack {raw.get('kind')!r}")
        if name == "aggregator" and raw.get("key", "lasa") not in AGGREGATOR_KEYS:
            raise ConfigError(f"aggregator.key: unknown aggregator {raw.get('key')!r}")
        built[name] = _build(cls, name, raw)

    agg = built["aggregator"]
    if agg.lambda_m is None:
        agg = dataclasses.replace(agg, lambda_m=DEFAULT_LAMBDA_M[built["dataset"].kind])
    if not 0 <= agg.sparsification_level < 1:
        raise ConfigError("aggregator.sparsification_level: must lie in [0, 1)")
    built["aggregator"] = agg
    if built["dataset"].kind not in DEFAULT_LAMBDA_M:
        raise ConfigError(f"dataset.kind: unknown dataset kind {built['dataset'].kind!r}")
    if built["partition"].kind not in ("iid", "dirichlet"):
        raise ConfigError(f"partition.kind: unknown partition {built['partition'].kind!r}")
    if built["model"].arch not in ("logreg", "mlp2"):
        raise ConfigError(f"model.arch: unknown architecture {built['model'].arch!r}")

    root_fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    kwargs = dict(built)
    for key, value in top.items():
        if key not in root_fields or key in _SECTIONS:
            raise ConfigError(f"{key}: unknown key")
        kwargs[key] = _coerce(key, value, str(root_fields[key].type))
    return ExperimentConfig(**kwargs)


def resolve_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill defaults that depend on other fields (used for programmatic configs)."""
    agg = cfg.aggregator
    if agg.lambda_m is None:
        agg = dataclasses.replace(agg, lambda_m=DEFAULT_LAMBDA_M[cfg.dataset.kind])
    if agg.f is None and agg.key in ("trmean", "multikrum", "bulyan"):
        agg = dataclasses.replace(agg, f=cfg.expected_malicious)
    return dataclasses.replace(cfg, aggregator=agg)
