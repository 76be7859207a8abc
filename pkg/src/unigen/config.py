"""Run configuration and its ``key = value`` text format."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

ARCHS = ("unigen", "controlnet")
SIGMA_DISTS = ("uniform", "logit_normal")

# keys that change parameter shapes or the forward computation
ARCH_KEYS = (
    "arch", "image_size", "channels", "patch", "d_model", "heads", "mlp_ratio",
    "base_layers", "ctrl_layers", "experts", "n_types", "vocab", "rope_base",
    "cond_scale", "seed",
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # architecture
    arch: str = "unigen"
    image_size: int = 16
    channels: int = 3
    patch: int = 2
    d_model: int = 64
    heads: int = 1
    mlp_ratio: int = 4
    base_layers: int = 4
    ctrl_layers: int = 4
    experts: int = 6
    n_types: int = 8
    vocab: int = 64
    rope_base: float = 10000.0
    cond_scale: float = 1.0
    seed: int = 1872
    # training
    lr: float = 1e-3
    warmup: int = 500
    steps: int = 2000
    batch_size: int = 8
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prompt_drop: float = 0.1
    sigma_dist: str = "uniform"
    zero_condition: bool = False
    log_every: int = 1
    # inference
    sample_steps: int = 28
    guidance: float = 3.5

    def validate(self) -> "RunConfig":
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.sigma_dist not in SIGMA_DISTS:
            raise ConfigError(f"sigma_dist must be one of {SIGMA_DISTS}, got {self.sigma_dist!r}")
        if self.d_model % 4:
            raise ConfigError(f"d_model must be divisible by 4 for 2-D rotary encoding, got {self.d_model}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.image_size % self.patch:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if not 1 <= self.ctrl_layers <= self.base_layers:
            raise ConfigError(f"ctrl_layers must lie in [1, base_layers={self.base_layers}], "
                              f"got {self.ctrl_layers}")
        for key in ("experts", "n_types", "batch_size", "steps", "channels", "mlp_ratio", "log_every"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.vocab < 2:
            raise ConfigError("vocab needs at least the null token and one symbol")
        if not 0 <= self.warmup <= self.steps:
            raise ConfigError(f"warmup {self.warmup} must lie in [0, steps={self.steps}]")
        if not 0.0 <= self.prompt_drop <= 1.0:
            raise ConfigError("prompt_drop must lie in [0, 1]")
        if self.sample_steps < 1 or self.guidance < 0:
            raise ConfigError("sample_steps must be >= 1 and guidance >= 0")
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()

    def arch_hash(self) -> str:
        text = "\n".join(f"{k}={getattr(self, k)!r}" for k in ARCH_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        lines = ["# unigen run config"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return dataclasses.replace(base or RunConfig(), **values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
