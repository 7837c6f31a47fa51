"""Run configuration: nested dataclasses with a lossless YAML round-trip."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .exceptions import ConfigError
from .synth import SCENARIOS


@dataclass
class ModelConfig:
    depth: int = 4
    d1: int = 64
    d2: int = 16
    heads: int = 4
    hidden: int = 128
    patch: int = 8
    c_max: int = 16
    literal_eq4: bool = False
    activation: str = "gelu"
    branch_up_std: float = 0.02


@dataclass
class VccConfig:
    tau: float = 2.0
    lambda_vcc: float = 1.0
    variant: str = "kl_reduced"
    prototype_grad: str = "blocked"
    kl_direction: str = "teacher_student"


@dataclass
class ScheduleConfig:
    epochs_initial: int = 20
    epochs_later: int = 10
    base_lr: float = 2e-3
    warmup_frac: float = 0.03
    weight_decay: float = 0.01
    batch_size: int = 16
    head_lr_scale: float = 1.0
    pretrain_samples: int = 512
    pretrain_epochs: int = 10


@dataclass
class DataConfig:
    scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    n_train: int = 96
    n_test: int = 48
    data_seed: int = 0
    dataset_dir: str | None = None


@dataclass
class RunConfig:
    mode: str = "unifier"
    T: int = 4
    seeds: list = field(default_factory=lambda: [0])
    order_seed: int = 1993
    threshold: float = 0.5
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    vcc: VccConfig = field(default_factory=VccConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        from .estimator import MODES

        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}", field="mode")
        scen = self.data.scenarios
        if not scen or len(set(scen)) != len(scen) or any(s not in SCENARIOS for s in scen):
            raise ConfigError(f"scenarios must be distinct ids from {SCENARIOS}", field="data.scenarios")
        if not isinstance(self.T, int) or self.T < 1 or self.T % len(scen):
            raise ConfigError(f"T={self.T} must be a positive multiple of {len(scen)} scenarios", field="T")
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative integers", field="seeds")
        if self.data.n_train < self.T // len(scen):
            raise ConfigError("n_train too small to split across the scenario's steps", field="data.n_train")
        if self.data.n_test < 1:
            raise ConfigError("n_test must be >= 1", field="data.n_test")
        if self.schedule.base_lr <= 0:
            raise ConfigError("base_lr must be > 0", field="schedule.base_lr")
        if not 0.0 < self.schedule.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must lie in (0, 1)", field="schedule.warmup_frac")
        if self.schedule.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", field="schedule.batch_size")
        if self.model.d1 % self.model.heads:
            raise ConfigError("heads must divide d1", field="model.heads")
        if 32 % self.model.patch:
            raise ConfigError("patch must divide the 32-pixel image side", field="model.patch")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]", field="threshold")
        from .vcc import ConsistencyConfig

        try:
            ConsistencyConfig(
                tau=self.vcc.tau, variant=self.vcc.variant, lambda_vcc=self.vcc.lambda_vcc,
                prototype_grad=self.vcc.prototype_grad, kl_direction=self.vcc.kl_direction,
            )
        except ConfigError as exc:
            raise ConfigError(str(exc), field=f"vcc.{exc.field}" if exc.field else "vcc") from None
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self):
        """SHA-256 of the canonical JSON form; stable across runs."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def estimator_params(self, seed):
        m, v, s = self.model, self.vcc, self.schedule
        return dict(
            mode=self.mode, patch=m.patch, d1=m.d1, depth=m.depth, heads=m.heads, hidden=m.hidden, d2=m.d2,
            c_max=m.c_max, literal_eq4=m.literal_eq4, activation=m.activation, branch_up_std=m.branch_up_std,
            tau=v.tau, lambda_vcc=v.lambda_vcc, variant=v.variant, prototype_grad=v.prototype_grad,
            kl_direction=v.kl_direction, epochs_initial=s.epochs_initial, epochs_later=s.epochs_later,
            base_lr=s.base_lr, warmup_frac=s.warmup_frac, weight_decay=s.weight_decay, batch_size=s.batch_size,
            head_lr_scale=s.head_lr_scale, pretrain_samples=s.pretrain_samples, pretrain_epochs=s.pretrain_epochs,
            threshold=self.threshold, random_state=seed,
        )


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping", field=path or "config")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        name = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key {name!r}", field=name)
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _coerce(default, value, sub)
    return cls(**kwargs)


def _coerce(default, value, name):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean", field=name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}", field=name)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}", field=name)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list", field=name)
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}", field=name)
    return value


def config_from_dict(data):
    return _build(RunConfig, data or {}, "")


def config_from_yaml(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}", field="config") from None
    return config_from_dict(data)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return config_from_yaml(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", field="config") from None


def set_override(cfg, dotted, value):
    """Set ``model.d1``-style keys from a YAML scalar string (CLI ``--set``)."""
    data = cfg.to_dict()
    node = data
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}", field=dotted)
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}", field=dotted)
    node[parts[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
    return config_from_dict(data)
