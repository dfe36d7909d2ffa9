"""Run configuration: JSON-loadable, validated, hashable.

Defaults are the desk-scale reference experiment: 30 simulated rounds at 16
ticks/s for 20 s, leak-masked dataset, 8 training epochs.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from xego.errors import XegoError
from xego.simcore import SimConfig

__all__ = ["ConfigError", "RunConfig", "load_config", "config_from_dict"]


class ConfigError(XegoError):
    """Configuration file or value is invalid."""


@dataclass
class RunConfig:
    seed: int = 0
    rounds: int = 30
    masked: bool = True
    lam: float = 1.0
    t_init: float = 10.0
    bias_mode: str = "fixed"  # fixed | paper | exact
    b_init: float = -3.0
    trainable_bias: bool = True
    # simulator (desk profile by default)
    tickrate: int = 16
    duration_s: float = 20.0
    flash_rate: float = 0.02
    vis_radius: float = 10.0
    noise_std: float = 1.5
    # dataset
    window_s: float = 5.0
    fps: int = 4
    jitter_s: float = 0.3
    ratios: tuple[int, int, int] = (70, 15, 15)
    # model dims
    d_h: int = 128
    d_enc: int = 128
    d_proj: int = 64
    d_agg: int = 128
    d_s: int = 16
    pov_sizes: tuple[int, ...] = (1, 2, 3, 4, 5)
    # optimizer
    lr: float = 3e-4
    weight_decay: float = 1e-2
    epochs: int = 8
    groups_per_batch: int = 6
    agents_per_group: int = 5

    def validate(self) -> None:
        checks = [
            (self.rounds >= 3, "rounds must be >= 3"),
            (self.lam >= 0, "lam must be non-negative"),
            (self.t_init > 0, "t_init must be positive"),
            (self.bias_mode in ("fixed", "paper", "exact"),
             f"bias_mode {self.bias_mode!r} not in fixed/paper/exact"),
            (self.tickrate >= 1, "tickrate must be >= 1"),
            (self.duration_s >= self.window_s, "duration_s shorter than one window"),
            (self.fps >= 1 and self.tickrate % self.fps == 0,
             "tickrate must be divisible by fps"),
            (len(self.ratios) == 3 and sum(self.ratios) == 100,
             "ratios must be three values summing to 100"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.groups_per_batch >= 1, "groups_per_batch must be >= 1"),
            (1 <= self.agents_per_group <= 5, "agents_per_group must be in 1..5"),
            (all(1 <= k <= 5 for k in self.pov_sizes) and len(self.pov_sizes) > 0,
             "pov_sizes must be non-empty within 1..5"),
            (self.lr > 0 and self.weight_decay >= 0, "bad optimizer settings"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def sim_config(self) -> SimConfig:
        return SimConfig(
            tickrate=self.tickrate,
            duration_s=self.duration_s,
            flash_rate=self.flash_rate,
            vis_radius=self.vis_radius,
            noise_std=self.noise_std,
            seed=self.seed,
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["pov_sizes"] = list(self.pov_sizes)
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.as_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg


_NESTED_SECTIONS = {
    "sim": ("tickrate", "duration_s", "flash_rate", "vis_radius", "noise_std"),
    "dataset": ("window_s", "fps", "jitter_s", "ratios"),
    "model": ("d_h", "d_enc", "d_proj", "d_agg", "d_s", "pov_sizes"),
    "optim": ("lr", "weight_decay", "epochs", "groups_per_batch", "agents_per_group"),
}
_TOP_LEVEL = (
    "seed", "rounds", "masked", "lam", "t_init", "bias_mode", "b_init", "trainable_bias",
)


def config_from_dict(raw: dict) -> RunConfig:
    """Accepts flat keys or the documented nested sections."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    flat: dict = {}
    known_nested = {k for keys in _NESTED_SECTIONS.values() for k in keys}
    for key, value in raw.items():
        if key in _NESTED_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            for sub, sub_value in value.items():
                if sub not in _NESTED_SECTIONS[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                flat[sub] = sub_value
        elif key in _TOP_LEVEL or key in known_nested:
            flat[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "ratios" in flat:
        flat["ratios"] = tuple(flat["ratios"])
    if "pov_sizes" in flat:
        flat["pov_sizes"] = tuple(flat["pov_sizes"])
    try:
        cfg = RunConfig(**flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    _check_types(cfg)
    cfg.validate()
    return cfg


def _check_types(cfg: RunConfig) -> None:
    ints = ("seed", "rounds", "tickrate", "fps", "d_h", "d_enc", "d_proj", "d_agg",
            "d_s", "epochs", "groups_per_batch", "agents_per_group")
    floats = ("lam", "t_init", "b_init", "duration_s", "flash_rate", "vis_radius",
              "noise_std", "window_s", "jitter_s", "lr", "weight_decay")
    for name in ints:
        if not isinstance(getattr(cfg, name), int) or isinstance(getattr(cfg, name), bool):
            raise ConfigError(f"{name} must be an integer")
    for name in floats:
        v = getattr(cfg, name)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"{name} must be a number")
    for name in ("masked", "trainable_bias"):
        if not isinstance(getattr(cfg, name), bool):
            raise ConfigError(f"{name} must be a boolean")


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
