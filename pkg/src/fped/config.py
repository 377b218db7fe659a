"""Flat ``key = value`` training configuration."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # data / output
    data: str = ""
    out: str = ""
    # optimisation
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # the per-position router bias moves ~lr per Adam step; a larger rate lets it reach the prior in a short run
    router_lr_scale: float = 20.0
    seed: int = 0
    # KL schedule: "staged" (ramp/plateau/decay fractions) or "constant"
    kl_schedule: str = "staged"
    kl_ramp: float = 0.2
    kl_plateau: float = 0.5
    kl_decay: float = 0.3
    kl_w_max: float = 10.0
    kl_w_min: float = 0.1
    kl_reduction: str = "mean"
    # architecture
    mode: str = "moe"
    cf: float = 1.0
    k: int = 2000
    topk_signed: bool = False
    n_features: int = 4096
    tokens: int = 8
    width: int = 32
    hidden: int = 64
    l2_experts: int = 14
    l2_hidden: int = 64
    l2_top_k: int = 2
    position_bias: bool = True
    shared_router: bool = False
    prior_hidden: int = 256
    diffusion_steps: int = 100
    # losses
    tau: float = 0.125
    bidirectional: bool = True
    lambda_prior: float = 1.0
    prior_target: str = "image"
    w_kl: float = 1.0
    w_cos: float = 1.0
    w_mse: float = 1.0
    w_softclip: float = 1.0
    w_dp: float = 1.0
    w_prior_clip: float = 1.0
    # monitoring
    monitor_size: int = 64
    divergence: float = 1e6

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.kl_schedule not in ("staged", "constant"):
            raise ConfigError("kl_schedule must be 'staged' or 'constant'")
        if self.kl_reduction not in ("mean", "sum"):
            raise ConfigError("kl_reduction must be 'mean' or 'sum'")
        if self.prior_target not in ("text", "image"):
            raise ConfigError("prior_target must be 'text' or 'image'")
        if not 0 < self.cf <= 2:
            raise ConfigError(f"cf={self.cf} outside (0, 2]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.tau <= 0 or self.router_lr_scale < 0:
            raise ConfigError("lr and router_lr_scale must be >= 0, tau > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if min(self.kl_ramp, self.kl_plateau, self.kl_decay) < 0:
            raise ConfigError("KL schedule fractions must be >= 0")
        if self.kl_w_max < 0 or self.kl_w_min < 0:
            raise ConfigError("KL weights must be >= 0")
        if self.k < 1 or self.n_features < 7:
            raise ConfigError("k must be >= 1 and n_features >= 7")
        if not 1 <= self.l2_top_k <= self.l2_experts:
            raise ConfigError("l2_top_k must lie in [1, l2_experts]")
        return self

    def loss_weights(self) -> dict:
        return {name: getattr(self, f"w_{name}") for name in ("kl", "cos", "mse", "softclip", "dp", "prior_clip")}

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def with_overrides(self, **overrides) -> "TrainConfig":
        return replace(self, **overrides).validate()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(kind, key: str, raw: str):
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
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


def parse_config_text(text: str, overrides: dict | None = None) -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(kinds[key], key, raw)
    for key, raw in (overrides or {}).items():
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(kinds[key], key, raw) if isinstance(raw, str) else raw
    return TrainConfig(**values).validate()


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), overrides)
