"""Flat key-value experiment configuration with fail-fast validation."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError

MODES = ("lsr", "uniform", "finetune")

# file key -> (attribute, parser)
_REQUIRED = {
    "seed": ("seed", int),
    "K": ("clients", int),
    "T": ("tasks", int),
    "base_classes": ("base_classes", int),
    "classes_per_increment": ("classes_per_increment", int),
    "grid": ("grid", int),
    "samples_per_task": ("samples_per_task", int),
    "beta": ("beta", float),
    "buffer_capacity": ("buffer_capacity", "int_or_list"),
    "R": ("rounds", int),
    "local_epochs": ("local_epochs", int),
    "batch": ("batch", int),
    "lr_base": ("lr_base", float),
    "lr_incr": ("lr_incr", float),
    "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float),
    "lambda": ("rehearsal_lambda", float),
    "alpha_s": ("alpha_s", float),
    "alpha_d": ("alpha_d", float),
    "alpha_c": ("alpha_c", float),
    "tau_fraction": ("tau_fraction", float),
    "mode": ("mode", str),
    "recovery": ("recovery", str),
    "client_fraction": ("client_fraction", float),
    "episodes": ("episodes", int),
    "inner_steps": ("inner_steps", int),
}

_OPTIONAL = {
    "sigma_noise": ("sigma_noise", float),
    "n_cells": ("n_cells", int),
    "test_samples_per_task": ("test_samples_per_task", int),
    "eta_gen": ("eta_gen", float),
    "eta_outer": ("eta_outer", float),
    "inner_lr": ("inner_lr", float),
    "recover_lr": ("recover_lr", float),
    "max_finetune_epochs": ("max_finetune_epochs", int),
    "split_fraction": ("split_fraction", float),
    "workers": ("workers", int),
    "init_scale": ("init_scale", float),
    "tau_override": ("tau_override", float),
}


@dataclass
class ExperimentConfig:
    seed: int
    clients: int
    tasks: int
    base_classes: int
    classes_per_increment: int
    grid: int
    samples_per_task: int
    beta: float
    buffer_capacity: int | list[int]
    rounds: int
    local_epochs: int
    batch: int
    lr_base: float
    lr_incr: float
    momentum: float
    weight_decay: float
    rehearsal_lambda: float
    alpha_s: float
    alpha_d: float
    alpha_c: float
    tau_fraction: float
    mode: str
    recovery: str
    client_fraction: float
    episodes: int
    inner_steps: int
    sigma_noise: float = 0.08
    n_cells: int = 6
    test_samples_per_task: int = 12
    eta_gen: float = 0.002
    eta_outer: float = 0.05
    inner_lr: float = 0.1
    recover_lr: float = 0.1
    max_finetune_epochs: int = 10
    split_fraction: float = 0.6
    workers: int = 1
    init_scale: float = 0.01
    tau_override: float | None = None

    def __post_init__(self):
        self.validate()

    @property
    def total_classes(self) -> int:
        return self.base_classes + (self.tasks - 1) * self.classes_per_increment

    @property
    def recovery_enabled(self) -> bool:
        return self.recovery == "on"

    def capacity_for(self, client_id: int) -> int:
        if isinstance(self.buffer_capacity, list):
            return self.buffer_capacity[client_id]
        return self.buffer_capacity

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.recovery not in ("on", "off"):
            raise ConfigError(f"recovery must be 'on' or 'off', got {self.recovery!r}")
        for name in ("clients", "tasks", "base_classes", "classes_per_increment", "grid",
                     "samples_per_task", "rounds", "local_epochs", "batch", "n_cells",
                     "test_samples_per_task"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if self.beta <= 0.0:
            raise ConfigError("beta must be positive")
        if not 0.0 < self.tau_fraction <= 1.0:
            raise ConfigError("tau_fraction must lie in (0, 1]")
        if self.tau_override is not None and not 0.0 < self.tau_override <= 1.0:
            raise ConfigError("tau_override must lie in (0, 1]")
        if not (0.0 <= self.alpha_s < self.alpha_d < self.alpha_c):
            raise ConfigError("alphas must satisfy 0 <= alpha_s < alpha_d < alpha_c")
        if isinstance(self.buffer_capacity, list):
            if len(self.buffer_capacity) != self.clients:
                raise ConfigError("per-client buffer_capacity list must have K entries")
            if any(c < 1 for c in self.buffer_capacity):
                raise ConfigError("buffer capacities must be >= 1")
        elif self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.episodes < 0 or self.inner_steps < 0:
            raise ConfigError("episodes and inner_steps must be >= 0")

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return ExperimentConfig(**values)

    def to_mapping(self) -> dict:
        """File-key view of the config, for reproducible result metadata.

        Excludes `workers`: parallelism is an execution knob and must not
        perturb result files.
        """
        out = {}
        for key, (attr, _) in {**_REQUIRED, **_OPTIONAL}.items():
            if key == "workers":
                continue
            value = getattr(self, attr)
            if value is None:
                continue
            out[key] = value
        return out


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind == "int_or_list":
            if "," in raw:
                return [int(part) for part in raw.split(",")]
            return int(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} = {raw!r}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    values: dict[str, object] = {}
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        if key in _REQUIRED:
            attr, kind = _REQUIRED[key]
        elif key in _OPTIONAL:
            attr, kind = _OPTIONAL[key]
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[attr] = _parse_value(key, raw, kind)
    missing = [key for key, (attr, _) in _REQUIRED.items() if attr not in values]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(sorted(missing))}")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)
