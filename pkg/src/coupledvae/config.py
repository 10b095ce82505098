"""Run configuration: flat ``key = value`` text with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    family: str = "gaussian"  # gaussian | flow | vmf
    mode: str = "coupled"  # vae | coupled | dae
    task: str = "lm"  # lm | dialogue
    emb_dim: int = 32
    hidden_dim: int = 64
    latent_dim: int = 8
    n_flows: int = 3
    dropout: float = 0.2
    # data
    vocab_cap: int = 10000
    max_len: int = 16
    lowercase: bool = False
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    vocab_path: str = ""
    # coupling
    lambda_r: float = 1.0
    lambda_m: float = 1.0
    match_kind: str = "rq"  # rq | eucl
    match_c: float = 1.0
    # regularizer
    reg: str = "kl"  # kl | mmd
    beta: float = 1.0
    schedule: str = "linear"  # constant | linear | cyclic
    anneal_start: int = 200
    anneal_end: int = 4200
    cycles: int = 4
    cycle_ratio: float = 0.5
    free_bits: float = 0.0
    mmd_c: float = 16.0
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    decay_start: int = 3000
    decay_interval: int = 200
    # training
    steps: int = 5000
    batch_size: int = 32
    seed: int = 0
    valid_every: int = 100
    valid_samples: int = 10
    track_every: int = 0
    track_rows: int = 32
    debug: bool = False
    # evaluation
    eval_samples: int = 100
    mi_samples: int = 100
    mi_contrast: int = 512
    bleu_samples: int = 10
    sample_count: int = 3200
    gen_len: int = 20

    def validate(self, check_paths: bool = False) -> "RunConfig":
        choices = {
            "family": ("gaussian", "flow", "vmf"),
            "mode": ("vae", "coupled", "dae"),
            "task": ("lm", "dialogue"),
            "match_kind": ("rq", "eucl"),
            "reg": ("kl", "mmd"),
            "schedule": ("constant", "linear", "cyclic"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} = {getattr(self, key)!r}; expected one of {allowed}")
        for key in ("lambda_r", "lambda_m", "beta", "free_bits", "dropout"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.dropout >= 1.0:
            raise ConfigError("dropout must be < 1")
        for key in ("emb_dim", "hidden_dim", "latent_dim", "batch_size", "steps", "valid_samples", "eval_samples"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.schedule == "linear" and self.anneal_start >= self.anneal_end:
            raise ConfigError("anneal_start must be smaller than anneal_end")
        if self.family == "vmf" and self.latent_dim < 2:
            raise ConfigError("vmf needs latent_dim >= 2")
        if self.task == "dialogue" and self.family != "gaussian":
            raise ConfigError("the conditional model supports the gaussian family only")
        if self.mi_contrast < 2:
            raise ConfigError("mi_contrast must be >= 2")
        if check_paths:
            for key in ("train_path", "valid_path", "test_path", "vocab_path"):
                path = getattr(self, key)
                if path and not Path(path).exists():
                    raise ConfigError(f"{key}: {path} does not exist")
        return self

    @property
    def coupled(self) -> bool:
        return self.mode == "coupled"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, types[key], lineno)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, value: str, typ, lineno: int):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {typ}, got {value!r}") from None
    return value
