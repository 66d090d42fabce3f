"""Run configuration: JSON documents with phantom/stage1/stage2/inference sections.

Defaults are desk-scale. ``full_scale()`` returns the full-resolution settings
(96x256x256 input, 20k stage-1 steps) for reference; it is not runnable on a
desktop with this engine.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .phantom import PhantomConfig
from .temporal import OdeSolverConfig, TemporalConfig, TimeGrid
from .vqgan import EncoderDecoderConfig, StageOneLossWeights


class ConfigError(ValueError):
    """Carries the dotted key path of the offending value."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Stage1Config:
    M: int = 64
    embed_dim: int = 8
    r: int = 4
    input_dim: int = 32
    base_channels: int = 16
    lambda_rec: float = 4.0
    lambda_perc: float = 4.0
    lambda_gan: float = 1.0
    beta: float = 0.25
    gan_start_step: int = 500
    lr: float = 2e-3
    steps: int = 600
    batch_size: int = 1
    max_volumes: int = 8
    seed: int = 0

    def model_config(self) -> EncoderDecoderConfig:
        return EncoderDecoderConfig(1, self.base_channels, self.r, self.embed_dim, self.M, (self.input_dim,) * 3)

    def loss_weights(self) -> StageOneLossWeights:
        return StageOneLossWeights(self.lambda_rec, self.lambda_perc, self.lambda_gan, self.beta, self.gan_start_step)


@dataclass
class Stage2Config:
    hidden_channels: int = 16
    projector_depth: int = 2
    solver: str = "rk4"
    step_size: float = 0.125
    lr: float = 2e-3
    epochs: int = 50
    time_weighting: str = "linear"
    skip_connections: bool = True
    encoder: str = "convgru"
    input_mask_ratio: float = 0.0
    seed: int = 0

    def solver_config(self) -> OdeSolverConfig:
        return OdeSolverConfig(self.solver, self.step_size)

    def model_config(self, embed_dim: int) -> TemporalConfig:
        return TemporalConfig(embed_dim, self.hidden_channels, self.projector_depth, self.solver_config(),
                              self.skip_connections, self.encoder, self.input_mask_ratio, self.time_weighting)


@dataclass
class InferenceConfig:
    interval_years: float = 0.5
    total_duration_years: float = 5.5

    def grid(self, start: float = 0.0) -> TimeGrid:
        return TimeGrid(self.interval_years, self.total_duration_years, start)


@dataclass
class PhantomSection:
    n_subjects: int = 20
    volume_dim: int = 32
    times_per_subject: list = field(default_factory=lambda: [3, 4])
    time_jitter: float = 0.15
    growth_rate_range: list = field(default_factory=lambda: [0.4, 2.4])
    noise_sigma: float = 0.02
    growth_mode: str = "linear"
    hazard_coef: float = 2.0
    base_hazard: float = 0.03
    censor_horizon: float = 6.0
    seed: int = 0

    def build(self, compression_rate: int) -> PhantomConfig:
        kw = dataclasses.asdict(self)
        return PhantomConfig(compression_rate=compression_rate, **kw)


@dataclass
class RunConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        out = dataclasses.replace(self, phantom=dataclasses.replace(self.phantom, seed=seed),
                                  stage1=dataclasses.replace(self.stage1, seed=seed),
                                  stage2=dataclasses.replace(self.stage2, seed=seed))
        return out


def full_scale() -> RunConfig:
    cfg = RunConfig()
    cfg.stage1 = dataclasses.replace(cfg.stage1, input_dim=256, lr=3e-4, steps=20000, gan_start_step=500)
    cfg.stage2 = dataclasses.replace(cfg.stage2, lr=2e-4, epochs=100)
    return cfg


_SECTIONS = {"phantom": PhantomSection, "stage1": Stage1Config, "stage2": Stage2Config, "inference": InferenceConfig}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(key, f"expected a list of {len(default)} numbers, got {value!r}")
        return [_coerce(f"{key}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default))]
    return value


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    sections = {}
    for name, value in doc.items():
        if name not in _SECTIONS:
            raise ConfigError(name, "unknown section")
        if not isinstance(value, dict):
            raise ConfigError(name, "section must be an object")
        cls = _SECTIONS[name]
        defaults = cls()
        kw = {}
        for k, v in value.items():
            if not hasattr(defaults, k):
                raise ConfigError(f"{name}.{k}", "unknown key")
            kw[k] = _coerce(f"{name}.{k}", v, getattr(defaults, k))
        sections[name] = dataclasses.replace(defaults, **kw)
    cfg = RunConfig(**sections)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON in {path}: line {exc.lineno} col {exc.colno}") from None
    return from_dict(doc)


def _check(key, ok, message):
    if not ok:
        raise ConfigError(key, message)


def validate(cfg: RunConfig) -> None:
    """Check every section against the preconditions of the module that consumes it."""
    s1, s2, inf, ph = cfg.stage1, cfg.stage2, cfg.inference, cfg.phantom
    _check("stage1.M", s1.M >= 2, "codebook needs at least 2 entries")
    _check("stage1.embed_dim", s1.embed_dim >= 1, "must be >= 1")
    _check("stage1.r", s1.r >= 2 and s1.r & (s1.r - 1) == 0, "compression rate must be a power of two >= 2")
    _check("stage1.input_dim", s1.input_dim % s1.r == 0, f"must be divisible by r={s1.r}")
    _check("stage1.base_channels", s1.base_channels >= 1, "must be >= 1")
    for k in ("lambda_rec", "lambda_perc", "lambda_gan"):
        _check(f"stage1.{k}", getattr(s1, k) >= 0, "must be >= 0")
    _check("stage1.beta", s1.beta > 0, "must be > 0")
    _check("stage1.gan_start_step", s1.gan_start_step >= 0, "must be >= 0")
    _check("stage1.lr", s1.lr > 0, "must be > 0")
    _check("stage1.steps", s1.steps >= 0, "must be >= 0")
    _check("stage1.batch_size", s1.batch_size >= 1, "must be >= 1")
    _check("stage1.max_volumes", s1.max_volumes >= 1, "must be >= 1")

    _check("stage2.hidden_channels", s2.hidden_channels >= 1, "must be >= 1")
    _check("stage2.projector_depth", s2.projector_depth in (1, 2), "must be 1 or 2")
    _check("stage2.solver", s2.solver in ("euler", "rk4"), "must be 'euler' or 'rk4'")
    _check("stage2.step_size", s2.step_size > 0, "must be > 0")
    _check("stage2.lr", s2.lr > 0, "must be > 0")
    _check("stage2.epochs", s2.epochs >= 0, "must be >= 0")
    _check("stage2.time_weighting", s2.time_weighting in ("linear", "uniform"), "must be 'linear' or 'uniform'")
    _check("stage2.encoder", s2.encoder in ("convgru", "ode_convgru"), "must be 'convgru' or 'ode_convgru'")
    _check("stage2.input_mask_ratio", 0 <= s2.input_mask_ratio < 1, "must be in [0, 1)")

    _check("inference.interval_years", inf.interval_years > 0, "must be > 0")
    _check("inference.total_duration_years", inf.total_duration_years >= inf.interval_years,
           "must be at least one interval")

    _check("phantom.volume_dim", ph.volume_dim == s1.input_dim, f"must equal stage1.input_dim={s1.input_dim}")
    try:
        ph.build(s1.r)
    except ValueError as exc:
        raise ConfigError("phantom", str(exc)) from None
