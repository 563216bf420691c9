"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data: str = ""                  # JSONL corpus; empty -> synthetic toy molecules
    toy_count: int = 2000
    max_n: int = 9
    data_seed: int = 7
    # attack
    poison_rate: float = 5.0        # percent of training graphs carrying the trigger
    r: float = 0.5
    trigger_node: str = "O"
    trigger_bond: str = "triple"
    trigger_size: int = 3
    connector_edges: int = 3
    connector_bond: str = "single"
    persistent_trigger: bool = True
    # diffusion
    T: int = 500
    schedule: str = "cosine"
    # model
    h_node: int = 48
    h_edge: int = 24
    h_global: int = 24
    n_layers: int = 3
    # optimisation
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    epochs: int = 100
    seed: int = 0
    checkpoint_every: int = 0
    train_dtype: str = "float32"    # optimiser arithmetic; stored values stay float32-exact
    # defenses / evaluation
    finetune_epochs: int = 100
    adversarial_ratio: float = 10.0  # percent of the corpus size, fresh backdoored graphs
    detect_quantile: float = 0.01
    sample_count: int = 500

    def __post_init__(self):
        if not 0 <= self.poison_rate < 100:
            raise ConfigError(f"poison_rate must lie in [0, 100), got {self.poison_rate}")
        if not 0 < self.r <= 1:
            raise ConfigError(f"r must lie in (0, 1], got {self.r}")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError(f"train_dtype must be float32 or float64, got {self.train_dtype!r}")
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.to_dict().items()))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


PROFILES = {
    "full": {},
    "desk": {"T": 50, "epochs": 60, "lr": 2e-3, "batch_size": 64, "finetune_epochs": 100},
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, kind, raw: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, base: dict | None = None, source: str = "<config>") -> ExperimentConfig:
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    values = dict(base or {})
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    return ExperimentConfig(**values)


def load_config(path: str | Path | None = None, profile: str = "full", **overrides) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = dict(PROFILES[profile])
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
    cfg = parse_config_text(text, base, source=str(path))
    return cfg.replace(**overrides) if overrides else cfg
