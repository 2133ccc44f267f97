"""Experiment configuration: one JSON file plus dotted-path overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .diffcore import ConfigError
from .evaluation import ProbeConfig
from .models import ModelConfig
from .synthdata import AugmentConfig, GeneratorConfig
from .trainer import ARMS, TrainConfig

EVAL_ARMS = ARMS + ("tc_syn",)


@dataclass
class EvalConfig:
    tc_syn_months: int = 6
    # checkpoint whose encoder and predictor build the propagated table
    tc_syn_arm: str = "tc"
    months_list: list[int] = field(default_factory=lambda: list(range(1, 10)))
    n_diag_patients: int = 40
    fd_delta: float = 1e-3

    def validate(self) -> None:
        if not 0 <= self.tc_syn_months <= 12:
            raise ValueError("evaluation.tc_syn_months must lie in [0, 12]")
        if self.tc_syn_arm not in ("tc", "tc_no_reg"):
            raise ValueError("evaluation.tc_syn_arm must be a displacement-map arm (tc or tc_no_reg)")
        if not self.months_list or any(not 0 <= m <= 12 for m in self.months_list):
            raise ValueError("evaluation.months_list entries must lie in [0, 12]")
        if self.n_diag_patients < 1 or not self.fd_delta > 0:
            raise ValueError("evaluation.n_diag_patients and fd_delta must be positive")


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    arms: list[str] = field(default_factory=lambda: list(ARMS))
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if not self.arms or any(a not in ARMS for a in self.arms):
            raise ConfigError(f"arms: every entry must be one of {ARMS}, got {self.arms}")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("arms: duplicate entries")
        if self.model.obs_dim != self.generator.obs_dim:
            raise ConfigError(
                f"model.obs_dim ({self.model.obs_dim}) must equal generator.obs_dim ({self.generator.obs_dim})"
            )
        for section in ("generator", "augment", "model", "trainer", "probe", "evaluation"):
            try:
                getattr(self, section).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def for_arm(self, arm: str) -> TrainConfig:
        return dataclasses.replace(self.trainer, arm=arm)


def _check_scalar(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if isinstance(default, tuple) and len(value) != len(default):
            raise ConfigError(f"{where}: expected {len(default)} entries, got {len(value)}")
        items = [_check_scalar(v, d, f"{where}[{i}]") for i, (v, d) in enumerate(zip(value, _pad(default, value)))]
        return tuple(items) if isinstance(default, tuple) else items
    return value


def _pad(default, value):
    # element prototype for variable-length lists
    if isinstance(default, tuple):
        return default
    proto = default[0] if default else value[0] if value else None
    return [proto] * len(value)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where + '.' if where else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        path = f"{where}.{f.name}" if where else f.name
        default = getattr(proto, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), data[f.name], path)
        else:
            kwargs[f.name] = _check_scalar(data[f.name], default, path)
    return cls(**kwargs)


def parse_override(text: str) -> tuple[str, object]:
    """``a.b=value`` with the value read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(f"--set {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set {text!r}: empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_override(data: dict, key: str, value) -> dict:
    """Set one existing field, addressed by a dotted path, in a raw config dict."""
    out = copy.deepcopy(data)
    defaults = asdict(ExperimentConfig())
    node, ref = out, defaults
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(ref, dict) or p not in ref or not isinstance(ref[p], dict):
            raise ConfigError(f"--set {key}: no config section {p!r}")
        ref = ref[p]
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p!r} is not an object in the config file")
    leaf = parts[-1]
    if not isinstance(ref, dict) or leaf not in ref:
        raise ConfigError(f"--set {key}: unknown key")
    if isinstance(ref[leaf], dict):
        raise ConfigError(f"--set {key}: names a section, not a field")
    node[leaf] = value
    return out


def config_from_dict(data: dict, overrides: list[str] = ()) -> ExperimentConfig:
    for text in overrides:
        data = apply_override(data, *parse_override(text))
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data, overrides)
