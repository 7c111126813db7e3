"""Flat key/value experiment configuration.

File format: one ``key = value`` assignment per line, ``#`` comments,
blank lines ignored.  Unknown keys are rejected.  Precedence is
command-line flag over file over built-in default.  Defaults mirror the
reference experiment setup (2000/500 samples on the +-pi box, 1000 epochs,
batch 200, cosine schedule from 0.01, Lipschitz window (0.1, 2), damping
floor 0.01, trunk 90-90, field baseline 100-100, V nets 64-64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

__all__ = ["ExperimentConfig", "ConfigError"]


class ConfigError(Exception):
    pass


def _int_list(text: str):
    return tuple(int(tok) for tok in str(text).replace(",", " ").split())


def _float_list(text: str):
    return tuple(float(tok) for tok in str(text).replace(",", " ").split())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    # experiment
    model: str = "shnd"
    seed: int = 0
    out_dir: str = "out"
    # dataset
    train_size: int = 2000
    test_size: int = 500
    angle_bound: float = math.pi
    rate_bound: float = math.pi
    train_data: str = ""      # optional CSV path; empty means generate
    test_data: str = ""
    # pendulum ground truth
    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    gravity: float = 9.81
    damping1: float = 0.5
    damping2: float = 0.5
    # stable Hamiltonian model
    lip_min: float = 0.1
    lip_max: float = 2.0
    damping_floor: float = 0.01
    bilip_hidden: tuple = (32, 32)
    jr_hidden: tuple = (90, 90)
    bilip_activation: str = "tanh"
    anchor: str = "origin"
    # passive port variant
    input_dim: int = 1
    port_hidden: tuple = (32,)
    # projection baselines
    fhat_hidden: tuple = (100, 100)
    v_hidden: tuple = (64, 64)
    mlp_activation: str = "tanh"
    alpha: float = 0.5
    grad_floor: float = 1e-8
    quad_eps: float = 0.01
    # training
    epochs: int = 1000
    batch_size: int = 200
    lr0: float = 0.01
    timing: bool = False
    # simulation protocol
    dt: float = 0.01
    horizon: float = 20.0
    sim_batch: int = 100
    sim_angle_bound: float = math.pi / 2.0
    save_trajectories: int = 2
    # sweeps
    data_sizes: tuple = (250, 500, 1000, 2000)
    ratio_lip_max: tuple = (0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
    # audits
    audit_samples: int = 1000
    audit_radius: float = 5.0

    def validate(self) -> "ExperimentConfig":
        if self.model not in ("shnd", "phs", "sd-mlp", "sd-icnn"):
            raise ConfigError(f"unknown model kind {self.model!r}")
        if self.anchor not in ("origin", "free"):
            raise ConfigError("anchor must be 'origin' or 'free'")
        return self


_PARSERS = {
    int: int,
    float: float,
    str: str,
    bool: _bool,
    tuple: None,  # resolved per field below
}

_INT_TUPLES = {"bilip_hidden", "jr_hidden", "port_hidden", "fhat_hidden",
               "v_hidden", "data_sizes"}
_FLOAT_TUPLES = {"ratio_lip_max"}

_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _INT_TUPLES:
        return _int_list(raw)
    if key in _FLOAT_TUPLES:
        return _float_list(raw)
    default = getattr(ExperimentConfig(), key)
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def _parse_lines(lines, source: str) -> dict:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = text.partition("=")
        key = key.strip()
        raw = raw.strip()
        try:
            out[key] = _convert(key, raw)
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {e}")
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build a config from defaults, an optional file, then overrides."""
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(_parse_lines(fh, str(path)))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _convert(key, raw)
    return ExperimentConfig(**values).validate()
