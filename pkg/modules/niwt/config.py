"""
Run configuration.

Values resolve in this order, later sources winning: dataclass defaults, the
config file (TOML or JSON, sectioned), ``NIWT_*`` environment variables (a
``.env`` file is honoured through python-dotenv) and finally CLI flags.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib

from dotenv import find_dotenv, load_dotenv

from .errors import ConfigError, MissingArtifactError

logger = logging.getLogger(__name__)

IMPORTANCE_LAYERS = ("conv1", "conv2", "conv3", "gap")
PROBE_MODES = ("noise", "generic", "seen")
OPTIMIZERS = ("adam", "sgd")
MAP_INITS = ("ridge", "random")


@dataclass
class PathsConfig:
    """Artifact locations; relative paths resolve against ``out_dir``."""
    out_dir: str = "runs/default"
    dataset: str = "dataset.niwt"
    seen_checkpoint: str = "seen.niwt"
    transferred_checkpoint: str = "transferred.niwt"
    forward_map: str = "map_forward.niwt"
    inverse_map: str = "map_inverse.niwt"
    importances: str = "importances.csv"
    knowledge_csv: str = ""

    def resolve(self, name: str) -> str:
        value = getattr(self, name)
        if not value:
            return ""
        return value if os.path.isabs(value) else os.path.join(self.out_dir, value)


@dataclass
class BenchmarkConfig:
    num_classes: int = 50
    d_k: int = 16
    active_attributes: int = 4
    images_per_class: int = 100
    channels: int = 3
    height: int = 32
    width: int = 32
    num_unseen: int = 10
    num_heldout: int = 5
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2


@dataclass
class TrainConfig:
    epochs: int = 12
    lr: float = 2e-3
    batch_size: int = 64
    freeze_below: Optional[str] = None


@dataclass
class MapConfig:
    lr: float = 1e-3
    max_epochs: int = 400
    patience: int = 20
    min_delta: float = 1e-3
    optimizer: str = "adam"
    bias: bool = False
    aggregate: bool = False
    init: str = "ridge"
    ridge: float = 1e-3


@dataclass
class TransferConfig:
    """Hyperparameters of the unseen-weight optimization."""
    lambda_: float = 1e-4
    lr: float = 1e-2
    batch_size: int = 32
    probe_mode: str = "generic"
    probe_count: int = 512
    max_iterations: int = 300
    min_improvement: float = 0.01
    patience: int = 40
    layer: str = "conv3"
    squared_regularizer: bool = False
    seed: int = 7
    grid_lambdas: List[float] = field(default_factory=lambda: [1e-5, 1e-4, 1e-3, 1e-2])
    grid_lrs: List[float] = field(default_factory=lambda: [1e-3, 1e-2])
    grid_batches: List[int] = field(default_factory=lambda: [16, 32, 64])

    def validate(self) -> None:
        if self.lambda_ < 0:
            raise ConfigError(f"transfer.lambda must be >= 0, got {self.lambda_}")
        if self.lr <= 0:
            raise ConfigError(f"transfer.lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.probe_count < 1 or self.max_iterations < 1:
            raise ConfigError("transfer batch_size, probe_count and max_iterations must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"transfer.patience must be >= 1, got {self.patience}")
        if not 0 <= self.min_improvement < 1:
            raise ConfigError(f"transfer.min_improvement must lie in [0, 1), got {self.min_improvement}")
        if self.probe_mode not in PROBE_MODES:
            raise ConfigError(f"unknown probe mode {self.probe_mode!r}; expected one of {PROBE_MODES}")
        if self.layer not in IMPORTANCE_LAYERS:
            raise ConfigError(f"unknown layer {self.layer!r}; expected one of {IMPORTANCE_LAYERS}")


@dataclass
class SweepConfig:
    lambdas: List[float] = field(default_factory=lambda: [0.0, 1e-5, 1e-4, 1e-3, 1e-2])
    noise_levels: List[float] = field(default_factory=lambda: [0.0, 1.0, 10.0, 100.0, 1000.0])
    layers: List[str] = field(default_factory=lambda: list(IMPORTANCE_LAYERS))
    probe_modes: List[str] = field(default_factory=lambda: list(PROBE_MODES))
    recovery_iterations: int = 200


@dataclass
class ExplainConfig:
    k: int = 4
    max_instances: int = 50
    heatmaps: int = 10


@dataclass
class RunConfig:
    """Fully resolved configuration of one run."""
    seed: int = 7
    threads: int = 4
    log_level: str = "INFO"
    paths: PathsConfig = field(default_factory=PathsConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    map: MapConfig = field(default_factory=MapConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    @property
    def layer(self) -> str:
        return self.transfer.layer

    def validate(self) -> "RunConfig":
        b = self.benchmark
        if min(b.num_classes, b.d_k, b.images_per_class, b.channels, b.height, b.width) < 1:
            raise ConfigError("benchmark sizes must be positive")
        if b.active_attributes < 1:
            raise ConfigError(f"active_attributes must be >= 1, got {b.active_attributes}")
        if b.num_classes > 2 ** b.d_k - 1:
            raise ConfigError(f"{b.num_classes} classes need distinct nonzero vectors over d_k={b.d_k} attributes")
        if b.num_unseen < 1:
            raise ConfigError("num_unseen must be >= 1")
        if b.num_heldout < 0 or b.num_unseen + b.num_heldout >= b.num_classes:
            raise ConfigError(
                f"infeasible split: {b.num_unseen} unseen + {b.num_heldout} held-out of {b.num_classes} classes"
            )
        if abs(b.train_fraction + b.val_fraction + b.test_fraction - 1.0) > 1e-9:
            raise ConfigError("train/val/test fractions must sum to 1")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.train.epochs < 0 or self.train.lr < 0 or self.train.batch_size < 1:
            raise ConfigError("invalid seen-training settings")
        if self.train.freeze_below is not None and self.train.freeze_below not in IMPORTANCE_LAYERS + ("head",):
            raise ConfigError(f"unknown freeze_below layer {self.train.freeze_below!r}")
        if self.map.patience < 1 or self.map.max_epochs < 1 or self.map.lr <= 0:
            raise ConfigError("map patience, max_epochs and lr must be positive")
        if self.map.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown map optimizer {self.map.optimizer!r}")
        if self.map.init not in MAP_INITS or self.map.ridge < 0:
            raise ConfigError(f"map init must be one of {MAP_INITS} with ridge >= 0")
        self.transfer.validate()
        for name in ("lambdas", "noise_levels", "layers", "probe_modes"):
            if not getattr(self.sweep, name):
                raise ConfigError(f"sweep grid {name!r} is empty")
        if any(v < 0 for v in self.sweep.lambdas) or any(v < 0 for v in self.sweep.noise_levels):
            raise ConfigError("sweep lambdas and noise levels must be >= 0")
        for layer in self.sweep.layers:
            if layer not in IMPORTANCE_LAYERS:
                raise ConfigError(f"unknown sweep layer {layer!r}")
        for mode in self.sweep.probe_modes:
            if mode not in PROBE_MODES:
                raise ConfigError(f"unknown sweep probe mode {mode!r}")
        if not 1 <= self.explain.k <= b.d_k:
            raise ConfigError(f"explain.k must lie in [1, d_k], got {self.explain.k}")
        if not (self.transfer.grid_lambdas and self.transfer.grid_lrs and self.transfer.grid_batches):
            raise ConfigError("transfer grid-search lists must be non-empty")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def require(self, name: str, artifact: str) -> str:
        """Path of artifact ``name``; raises if it does not exist yet."""
        path = self.paths.resolve(name)
        if not path or not os.path.exists(path):
            raise MissingArtifactError(artifact, path)
        return path


def _apply_section(target: Any, values: Dict[str, Any], where: str) -> Any:
    known = {f.name: f for f in fields(target)}
    updates = {}
    for key, value in values.items():
        name = "lambda_" if key == "lambda" else key
        if name not in known:
            raise ConfigError(f"unknown config key {where}{key}")
        current = getattr(target, name)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where}{key} must be a table")
            updates[name] = _apply_section(current, value, f"{where}{key}.")
        else:
            updates[name] = _coerce(value, current, f"{where}{key}")
    return replace(target, **updates)


def _coerce(value: Any, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"config key {key} must be a list")
            element = type(current[0]) if current else None
            return [element(v) if element else v for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key}: cannot use {value!r} ({exc})") from exc
    return value


def read_config_file(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.endswith(".json"):
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        with open(path, "rb") as f:
            return tomllib.load(f)
    except (json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc


_ENV_KEYS = {
    "NIWT_SEED": ("seed",),
    "NIWT_THREADS": ("threads",),
    "NIWT_OUT": ("paths", "out_dir"),
    "NIWT_LAYER": ("transfer", "layer"),
    "NIWT_LOG_LEVEL": ("log_level",),
}


def environment_overrides() -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for env, path in _ENV_KEYS.items():
        value = os.getenv(env)
        if value is None or value == "":
            continue
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    return overrides


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    if not overrides:
        return config
    config = _apply_section(config, overrides, "")
    config.transfer = replace(config.transfer, seed=config.seed)
    return config


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                use_env: bool = True) -> RunConfig:
    """
    Build a validated RunConfig.

    Args:
        path: Optional TOML or JSON file with sections named like RunConfig fields
        overrides: Nested dict applied last (CLI flags)
        use_env: Read ``NIWT_*`` variables (after loading ``.env``)

    Returns:
        The resolved and validated configuration
    """
    config = RunConfig()
    if path:
        config = _apply_section(config, read_config_file(path), "")
        logger.info(f"Loaded config from {path}")
    if use_env:
        load_dotenv(find_dotenv(usecwd=True))
        config = _apply_section(config, environment_overrides(), "")
    config = apply_overrides(config, overrides or {})
    config.transfer = replace(config.transfer, seed=config.seed)
    return config.validate()
