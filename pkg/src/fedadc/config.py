"""Experiment configuration and the flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from typing import Optional

from . import nn
from .algorithms import LocalConfig
from .data import PartitionSpec
from .errors import ConfigError
from .personalization import PersonalizationConfig

ALGORITHMS = ("fedavg", "slowmo", "fedadc-nesterov", "fedadc-heavyball", "fedadc-dm", "fedprox")

# (local rule, server rule) per algorithm
RULES = {
    "fedavg": ("fedavg", "fedavg"),
    "slowmo": ("fedavg", "slowmo"),
    "fedadc-nesterov": ("fedadc-nesterov", "fedadc"),
    "fedadc-heavyball": ("fedadc-heavyball", "fedadc"),
    "fedadc-dm": ("fedadc-dm", "dm"),
    "fedprox": ("fedprox", "fedavg"),
}

DEFAULT_ETA_GRID = (0.01, 0.025, 0.05, 0.1)
DEFAULT_BETA_GRID = (0.6, 0.7, 0.8, 0.9)


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    train_path: str = ""
    test_path: str = ""
    num_classes: int = 10
    input_dim: int = 32
    train_per_class: int = 100
    test_per_class: int = 50
    class_separation: float = 3.0
    data_seed: Optional[int] = None
    # partition
    partition: str = "sort-partition"
    num_clients: int = 50
    s: int = 2
    dirichlet_alpha: float = 0.5
    partition_seed: Optional[int] = None
    test_fraction: float = 0.2
    # model
    model: str = "mlp"
    hidden_dims: tuple = (64,)
    activation: str = "relu"
    # local training
    algorithm: str = "fedadc-heavyball"
    loss: str = "ce"
    lam: float = 0.35
    tau: float = 1.0
    weight_decay: float = 0.0
    batch_size: int = 64
    local_iters: Optional[int] = 8
    local_epochs: Optional[int] = None
    phi: Optional[float] = None
    mu: Optional[float] = None
    # server
    alpha: float = 1.0
    beta_global: float = 0.9
    beta_local: float = 0.9
    eta: float = 0.05
    rounds: int = 300
    participation: float = 0.2
    selection: str = "random"
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    final_window: int = 10
    record_wall_time: bool = False
    # personalization
    personalize: bool = False
    personal_epochs: int = 2
    personal_lr: Optional[float] = None
    personal_regularizer: str = "none"
    personal_mu: float = 0.01
    personal_lam: float = 0.35
    personal_tau: float = 1.0
    personal_batch_size: Optional[int] = None
    # sweep
    eta_grid: tuple = DEFAULT_ETA_GRID
    beta_grid: tuple = DEFAULT_BETA_GRID

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.eta_grid = tuple(float(v) for v in self.eta_grid)
        self.beta_grid = tuple(float(v) for v in self.beta_grid)
        self.validate()

    def validate(self):
        if self.dataset not in ("synthetic", "file"):
            raise ConfigError(f"unknown dataset source {self.dataset!r}")
        if self.dataset == "file" and not (self.train_path and self.test_path):
            raise ConfigError("dataset = file needs train_path and test_path")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.selection not in ("random", "class-cover"):
            raise ConfigError(f"unknown selection {self.selection!r}")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.threads < 1 or self.final_window < 1:
            raise ConfigError("threads and final_window must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        # building the component specs runs their own range checks
        self.model_spec_for(self.input_dim, self.num_classes)
        self.partition_spec()
        self.local_config()
        self.personalization_config()
        self.server_hyper()

    @property
    def local_rule(self) -> str:
        return RULES[self.algorithm][0]

    @property
    def server_rule(self) -> str:
        return RULES[self.algorithm][1]

    @property
    def clients_per_round(self) -> int:
        return participants(self.num_clients, self.participation)

    def model_spec_for(self, input_dim, num_classes) -> nn.ModelSpec:
        hidden = self.hidden_dims if self.model == "mlp" else ()
        return nn.ModelSpec(self.model, input_dim, num_classes, hidden, self.activation)

    def partition_spec(self) -> PartitionSpec:
        seed = self.partition_seed if self.partition_seed is not None else self.seed
        if self.partition == "sort-partition":
            return PartitionSpec("sort-partition", self.num_clients, s=self.s, seed=seed,
                                 test_fraction=self.test_fraction)
        return PartitionSpec(self.partition, self.num_clients, alpha=self.dirichlet_alpha,
                             seed=seed, test_fraction=self.test_fraction)

    def loss_spec(self) -> nn.LossSpec:
        return nn.LossSpec(self.loss, self.lam if self.loss == "combined" else 0.0,
                           self.tau, self.weight_decay)

    def local_config(self) -> LocalConfig:
        return LocalConfig(
            algorithm=self.local_rule,
            loss=self.loss_spec(),
            batch_size=self.batch_size,
            local_iters=self.local_iters,
            local_epochs=self.local_epochs,
            phi=self.phi,
            mu=self.mu,
        )

    def personalization_config(self) -> Optional[PersonalizationConfig]:
        if not self.personalize:
            return None
        return PersonalizationConfig(
            epochs=self.personal_epochs,
            lr=self.personal_lr,
            regularizer=self.personal_regularizer,
            mu=self.personal_mu,
            lam=self.personal_lam,
            tau=self.personal_tau,
            batch_size=self.personal_batch_size or self.batch_size,
        )

    def server_hyper(self) -> dict:
        for name in ("beta_global", "beta_local"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        return dict(alpha=self.alpha, beta_global=self.beta_global,
                    beta_local=self.beta_local, eta=self.eta)

    def resolved(self) -> "ExperimentConfig":
        """Copy with derived seeds filled in."""
        return dataclasses.replace(
            self,
            data_seed=self.seed if self.data_seed is None else self.data_seed,
            partition_seed=self.seed if self.partition_seed is None else self.partition_seed,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


def participants(num_clients: int, c: float) -> int:
    """``ceil(c * N)``, guarded against float noise such as ``0.1 * 30``."""
    return max(1, min(num_clients, math.ceil(c * num_clients - 1e-9)))


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_value(key, raw):
    kind = _FIELD_TYPES[key]
    text = raw.strip()
    optional = kind.startswith("Optional")
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if "bool" in kind:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return float(text)
        if kind == "tuple":
            parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
            conv = int if key == "hidden_dims" else float
            return tuple(conv(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_config_text(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key == "beta":
            beta = _parse_value("beta_global", raw)
            values["beta_global"] = values["beta_local"] = beta
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config_text(cfg: ExperimentConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            value = "none"
        elif isinstance(value, list):
            value = ", ".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
