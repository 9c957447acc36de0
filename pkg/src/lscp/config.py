"""Pipeline configuration: one flat, human-editable TOML file.

Flags override file values; environment variables override flags only for
secrets (the remote API key). A config snapshot is embedded in every run
report so runs are reproducible from the report alone.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

ACCEPT_POLICIES = ("graduated", "threshold")
BACKEND_KINDS = ("toy", "scripted", "remote")


@dataclass(frozen=True)
class PipelineConfig:
    # Stage 3 gate and optimizer
    r: float = 0.98
    beta2_floor: float = 0.1
    lr: float = 1e-5
    weight_decay: float = 0.01
    epochs: int = 3
    # Stage 1
    lam: float = 2.0
    window_w: int = 64
    # Stage 2
    c: float = 5.0
    n_min: int = 3
    n_max: int = 20
    accept_policy: str = "graduated"
    include_source_windows: bool = True
    # Broken chains normally leave an uncertainty-framed strangeness record;
    # optionally discard passages that both failed and were only marginally
    # above the detection threshold (noise signature, not novelty).
    discard_marginal_failures: bool = False
    marginal_band_sigma: float = 0.5
    gen_temperature: float = 0.7
    check_temperature: float = 0.1
    chain_max_tokens: int = 1024
    answer_max_tokens: int = 64
    source_window_tokens: int = 256
    template_dir: str | None = None
    # Run control
    seed: int = 0
    workers: int = 1
    train_enabled: bool = True
    # Backend selection
    backend_kind: str = "toy"
    backend_checkpoint: str | None = None
    backend_script: str | None = None
    remote_url: str | None = None
    remote_model: str = "default"
    toy_vocab_size: int = 256
    toy_context_length: int = 256
    toy_embed_dim: int = 128
    toy_n_layers: int = 4
    toy_n_heads: int = 4

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise ConfigError(f"r must be in (0, 1], got {self.r}")
        if not 0.0 < self.beta2_floor < 1.0:
            raise ConfigError("beta2_floor must be in (0, 1)")
        for name in ("lr", "c", "gen_temperature", "check_temperature"):
            if getattr(self, name) < 0 or (name in ("lr", "c") and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.marginal_band_sigma < 0:
            raise ConfigError("marginal_band_sigma must be non-negative")
        for name in ("epochs", "window_w", "n_min", "n_max", "workers", "chain_max_tokens",
                     "answer_max_tokens", "source_window_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_min > self.n_max:
            raise ConfigError("n_min must be <= n_max")
        if self.accept_policy not in ACCEPT_POLICIES:
            raise ConfigError(f"accept_policy must be one of {ACCEPT_POLICIES}")
        if self.backend_kind not in BACKEND_KINDS:
            raise ConfigError(f"backend_kind must be one of {BACKEND_KINDS}")
        if self.backend_kind == "scripted" and not self.backend_script:
            raise ConfigError("scripted backend needs backend_script")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["lambda"] = payload.pop("lam")
        return payload


_FIELD_NAMES = {f.name for f in fields(PipelineConfig)}
# TOML/flag key "lambda" maps onto the lam field (lambda is reserved in Python).
_KEY_ALIASES = {"lambda": "lam"}


def config_from_mapping(payload: dict) -> PipelineConfig:
    kwargs = {}
    for key, value in payload.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in _FIELD_NAMES:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[name] = value
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> PipelineConfig:
    payload: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                payload.update(tomllib.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is not None:
            payload[key] = value
    return config_from_mapping(payload)
