"""Stage 2: latent neural ODE over quantised embedding sequences.

A 3-D ConvGRU runs backwards over the observed latents to produce the ODE
initial state at the first observation. The hidden state is integrated with
a fixed-step solver to the requested times, and a small conv projector turns
each consecutive pair of hidden states into a difference map that is added
onto the previous generated latent.

Internal tensors are channel-first ([1, C, d, h, w]); latent embeddings at
the public boundary are [d, h, w, embed_dim] like the rest of the package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import (DimensionError, Tensor, add, as_tensor, concat, masked_mean, mul, no_grad,
                       permute, sigmoid, square, sub, tanh, where)
from .nn import Conv3d, Module
from .optim import OptimizerState, adamw, optimizer_step, zero_grad


class OdeDivergenceError(FloatingPointError):
    pass


# ------------------------------------------------------------------ types

@dataclass
class TimedLatentSequence:
    times: list[float]
    latents: list[np.ndarray]  # each [d, h, w, embed_dim]
    latent_mask: np.ndarray  # bool [d, h, w]

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        if len(self.times) < 2:
            raise ValueError("a sequence needs at least two observations")
        if len(self.latents) != len(self.times):
            raise ValueError(f"{len(self.times)} times but {len(self.latents)} latents")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError(f"times must be strictly increasing: {self.times}")
        self.latents = [np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float32)
                        for z in self.latents]
        shape = self.latents[0].shape
        if len(shape) != 4 or any(z.shape != shape for z in self.latents):
            raise DimensionError("all latents must share one [d, h, w, embed_dim] shape")
        self.latent_mask = np.asarray(self.latent_mask, dtype=bool)
        if self.latent_mask.shape != shape[:3]:
            raise DimensionError(f"mask {self.latent_mask.shape} does not match latent grid {shape[:3]}")

    def subset(self, keep: Sequence[int]) -> "TimedLatentSequence":
        return TimedLatentSequence([self.times[i] for i in keep], [self.latents[i] for i in keep],
                                   self.latent_mask)


@dataclass
class OdeState:
    h: Tensor  # [1, hidden, d, h, w]
    t: float


@dataclass(frozen=True)
class OdeSolverConfig:
    method: str = "rk4"
    step_size: float = 0.125

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown solver {self.method!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


@dataclass(frozen=True)
class TimeGrid:
    interval: float
    total_duration: float
    start: float = 0.0

    def __post_init__(self):
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        if self.total_duration < self.interval:
            raise ValueError("total duration must be at least one interval")

    @property
    def count(self) -> int:
        return int(math.floor(self.total_duration / self.interval + 1e-9))

    @property
    def targets(self) -> list[float]:
        return [self.start + i * self.interval for i in range(1, self.count + 1)]


@dataclass
class TemporalConfig:
    embed_dim: int = 8
    hidden_channels: int = 16
    projector_depth: int = 2
    solver: OdeSolverConfig = field(default_factory=OdeSolverConfig)
    skip_connections: bool = True
    encoder: str = "convgru"  # or "ode_convgru"
    input_mask_ratio: float = 0.0
    time_weighting: str = "linear"

    def __post_init__(self):
        if self.projector_depth not in (1, 2):
            raise ValueError("projector_depth must be 1 or 2")
        if self.encoder not in ("convgru", "ode_convgru"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if not 0.0 <= self.input_mask_ratio < 1.0:
            raise ValueError("input_mask_ratio must be in [0, 1)")
        if self.time_weighting not in ("linear", "uniform"):
            raise ValueError(f"unknown time weighting {self.time_weighting!r}")


# ----------------------------------------------------------------- layers

def to_channels_first(z) -> Tensor:
    z = as_tensor(z)
    return permute(z, (3, 0, 1, 2)).reshape((1, z.shape[3], *z.shape[:3]))


def to_channels_last(z) -> Tensor:
    z = as_tensor(z)
    return permute(z.reshape(z.shape[1:]), (1, 2, 3, 0))


class ConvGRUCell(Module):
    def __init__(self, input_channels, hidden_channels, rng, kernel=3):
        cin = input_channels + hidden_channels
        pad = kernel // 2
        self.update = Conv3d(cin, hidden_channels, kernel, padding=pad, rng=rng)
        self.reset = Conv3d(cin, hidden_channels, kernel, padding=pad, rng=rng)
        self.candidate = Conv3d(cin, hidden_channels, kernel, padding=pad, rng=rng)

    def __call__(self, h, z):
        hz = concat([h, z], axis=1)
        u = sigmoid(self.update(hz))
        r = sigmoid(self.reset(hz))
        c = tanh(self.candidate(concat([mul(r, h), z], axis=1)))
        return add(mul(sub(1.0, u), h), mul(u, c))


class OdeFunc(Module):
    """Three 3-D convs with tanh between; time enters as a constant extra channel."""

    def __init__(self, hidden_channels, rng):
        self.conv1 = Conv3d(hidden_channels + 1, hidden_channels, 3, padding=1, rng=rng)
        self.conv2 = Conv3d(hidden_channels, hidden_channels, 3, padding=1, rng=rng)
        self.conv3 = Conv3d(hidden_channels, hidden_channels, 3, padding=1, rng=rng)

    def __call__(self, h, t):
        tc = Tensor(np.full((1, 1, *h.shape[2:]), t, dtype=np.float32))
        x = tanh(self.conv1(concat([h, tc], axis=1)))
        x = tanh(self.conv2(x))
        return self.conv3(x)


class Projector(Module):
    def __init__(self, hidden_channels, embed_dim, depth, rng):
        if depth == 2:
            self.layers = [Conv3d(2 * hidden_channels, hidden_channels, 3, padding=1, rng=rng),
                           Conv3d(hidden_channels, embed_dim, 3, padding=1, rng=rng)]
        else:
            self.layers = [Conv3d(2 * hidden_channels, embed_dim, 3, padding=1, rng=rng)]

    def __call__(self, h_curr, h_prev):
        x = concat([h_curr, h_prev], axis=1)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = tanh(x)
        return x


class TemporalModel(Module):
    def __init__(self, cfg: TemporalConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        hc, e = cfg.hidden_channels, cfg.embed_dim
        self.embed_last = Conv3d(e, hc, 3, padding=1, rng=rng)
        self.cell = ConvGRUCell(e, hc, rng)
        self.dynamics = OdeFunc(hc, rng)
        self.projector = Projector(hc, e, cfg.projector_depth, rng)
        if cfg.encoder == "ode_convgru":
            self.encoder_dynamics = OdeFunc(hc, rng)

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0.0


# ----------------------------------------------------------------- solver

def _step(f, h, t, dt, method):
    if method == "euler":
        return add(h, mul(f(h, t), dt))
    k1 = f(h, t)
    k2 = f(add(h, mul(k1, dt / 2)), t + dt / 2)
    k3 = f(add(h, mul(k2, dt / 2)), t + dt / 2)
    k4 = f(add(h, mul(k3, dt)), t + dt)
    incr = add(add(k1, mul(k2, 2.0)), add(mul(k3, 2.0), k4))
    return add(h, mul(incr, dt / 6))


def integrate(f: Callable, h, t0: float, t1: float, solver: OdeSolverConfig):
    """Fixed-step integration from t0 to t1 (either direction), landing exactly on t1."""
    h = as_tensor(h)
    span = t1 - t0
    if span == 0:
        return h
    direction = 1.0 if span > 0 else -1.0
    step = solver.step_size
    n_full = int(math.floor(abs(span) / step + 1e-9))
    t = t0
    for i in range(n_full):
        h = _step(f, h, t, direction * step, solver.method)
        t = t0 + direction * step * (i + 1)
        _check_finite(h, t)
    rest = t1 - t
    if abs(rest) > 1e-9 * step:
        h = _step(f, h, t, rest, solver.method)
        _check_finite(h, t1)
    return h


def _check_finite(h, t):
    if not np.isfinite(h.data).all():
        raise OdeDivergenceError(f"ODE state became non-finite after t={t:.6g}")


def ode_solve(h0: OdeState, f: Callable, targets: Sequence[float], solver: OdeSolverConfig = OdeSolverConfig()):
    """States at each target time, integrating piecewise from ``h0.t``."""
    targets = [float(s) for s in targets]
    if any(b <= a for a, b in zip(targets, targets[1:])):
        raise ValueError("targets must be strictly increasing")
    if targets and targets[0] < h0.t:
        raise ValueError(f"first target {targets[0]} precedes initial time {h0.t}")
    out = []
    h, t = h0.h, h0.t
    for s in targets:
        try:
            h = integrate(f, h, t, s, solver)
        except OdeDivergenceError as exc:
            raise OdeDivergenceError(f"{exc}; last finite time {t:.6g}") from None
        t = s
        out.append(OdeState(h, s))
    return out


# ---------------------------------------------------------------- encoder

def convgru_cell(h, z_in, cell: ConvGRUCell) -> Tensor:
    """h [1, hidden, d, h, w], z_in [d, h, w, embed_dim] -> new hidden."""
    h = as_tensor(h)
    z = to_channels_first(z_in)
    if h.shape[2:] != z.shape[2:]:
        raise DimensionError(f"hidden grid {h.shape[2:]} vs latent grid {z.shape[2:]}")
    return cell(h, z)


def encode_sequence_backwards(seq: TimedLatentSequence, model: TemporalModel) -> OdeState:
    """Run the ConvGRU from the last observation back to the first.

    The last latent seeds the hidden state through a single conv; each earlier
    latent is then consumed by one cell application, so a length-T+1 sequence
    costs T cell calls.
    """
    if len(seq.times) < 2:
        raise ValueError("sequence shorter than 2")
    h = tanh(model.embed_last(to_channels_first(seq.latents[-1])))
    for i in range(len(seq.times) - 1, 0, -1):
        if model.config.encoder == "ode_convgru":
            h = integrate(model.encoder_dynamics, h, seq.times[i], seq.times[i - 1], model.config.solver)
        h = convgru_cell(h, seq.latents[i - 1], model.cell)
    return OdeState(h, seq.times[0])


def project_difference(h_curr, h_prev, model: TemporalModel) -> Tensor:
    """Difference map [d, h, w, embed_dim] from two hidden states."""
    h_curr, h_prev = as_tensor(h_curr), as_tensor(h_prev)
    if h_curr.shape != h_prev.shape:
        raise DimensionError(f"hidden states differ: {h_curr.shape} vs {h_prev.shape}")
    return to_channels_last(model.projector(h_curr, h_prev))


# ---------------------------------------------------------------- rollout

@dataclass
class Rollout:
    times: list[float]  # s_1..s_S
    latents: list[Tensor]  # predicted embeddings [d, h, w, e] at s_1..s_S
    differences: list[Tensor]  # D_{s_i}, [d, h, w, e]
    baseline: np.ndarray  # observed embeddings at t_0


def _latent_rollout(h0: OdeState, base, mask_cl, model: TemporalModel, targets, solver):
    states = ode_solve(h0, model.dynamics, targets, solver)
    prev_h = h0.h
    prev_z = base
    lats, diffs = [], []
    for st in states:
        out = to_channels_last(model.projector(st.h, prev_h))
        if model.config.skip_connections:
            d = out
            z = where(mask_cl, add(d, prev_z), base)
        else:
            z = where(mask_cl, out, base)
            d = sub(z, prev_z)
        lats.append(z)
        diffs.append(d)
        prev_h, prev_z = st.h, z
    return lats, diffs


def rollout(seq: TimedLatentSequence, targets, model: TemporalModel, solver: OdeSolverConfig | None = None) -> Rollout:
    """Generate latents at the target times (a TimeGrid or increasing times after t_0).

    Voxels outside the latent mask keep their t_0 value at every step.
    """
    solver = solver or model.config.solver
    if isinstance(targets, TimeGrid):
        targets = [seq.times[0] + s - targets.start for s in targets.targets]
    targets = [float(s) for s in targets]
    if not targets or targets[0] <= seq.times[0]:
        raise ValueError("targets must lie strictly after the first observation")
    h0 = encode_sequence_backwards(seq, model)
    base = Tensor(seq.latents[0])
    mask_cl = np.broadcast_to(seq.latent_mask[..., None], base.shape)
    lats, diffs = _latent_rollout(h0, base, mask_cl, model, targets, solver)
    return Rollout(targets, lats, diffs, seq.latents[0])


# ------------------------------------------------------------------ loss

def time_weights(n: int, scheme: str = "linear") -> np.ndarray:
    """Per-target weights summing to ``n``; linear weights grow with the index."""
    if n < 1:
        raise ValueError("need at least one target")
    raw = np.arange(1, n + 1, dtype=np.float64) if scheme == "linear" else np.ones(n)
    return raw * n / raw.sum()


def stage2_loss(predicted, observed, differences, delta_targets, weights, mask) -> Tensor:
    """sum_i w_i * (|z_hat_i - z_i|^2 + |D_i - dz_i|^2), each a mean over ROI entries."""
    n = len(predicted)
    if not (len(observed) == len(differences) == len(delta_targets) == len(weights) == n):
        raise ValueError("predictions, targets, differences and weights must align")
    m = np.asarray(mask, dtype=bool)
    total = None
    for zp, zo, d, dz, w in zip(predicted, observed, differences, delta_targets, weights):
        zp, d = as_tensor(zp), as_tensor(d)
        mm = np.broadcast_to(m[..., None], zp.shape) if m.shape != zp.shape else m
        term = add(masked_mean(square(sub(zp, zo)), mm), masked_mean(square(sub(d, dz)), mm))
        term = mul(term, float(w))
        total = term if total is None else add(total, term)
    return total


def sequence_loss(seq: TimedLatentSequence, model: TemporalModel, rng: np.random.Generator | None = None) -> Tensor:
    """Stage-2 training loss on one sequence (targets are its observed times)."""
    enc_seq = seq
    ratio = model.config.input_mask_ratio
    if ratio > 0 and len(seq.times) > 2:
        rng = rng or np.random.default_rng(0)
        later = np.arange(1, len(seq.times))
        drop = rng.random(len(later)) < ratio
        if drop.all():
            drop[rng.integers(len(later))] = False
        enc_seq = seq.subset([0] + [int(i) for i in later[~drop]])
    h0 = encode_sequence_backwards(enc_seq, model)
    base = Tensor(seq.latents[0])
    mask_cl = np.broadcast_to(seq.latent_mask[..., None], base.shape)
    lats, diffs = _latent_rollout(h0, base, mask_cl, model, seq.times[1:], model.config.solver)
    obs = seq.latents[1:]
    deltas = [b - a for a, b in zip(seq.latents[:-1], seq.latents[1:])]
    w = time_weights(len(obs), model.config.time_weighting)
    return stage2_loss(lats, obs, diffs, deltas, w, mask_cl)


@dataclass
class Stage2Result:
    epoch_losses: list[float]
    best_loss: float
    best_state: dict


def stage2_train(dataset: Sequence[TimedLatentSequence], model: TemporalModel, opt: OptimizerState | None = None,
                 epochs: int = 100, seed: int = 0, on_epoch: Callable | None = None) -> Stage2Result:
    """Batch-of-one training; the lowest-loss epoch's parameters are loaded back at the end."""
    opt = opt or adamw()
    rng = np.random.default_rng(seed)
    params = model.parameters()
    losses = []
    best, best_state = math.inf, model.state_dict()
    for epoch in range(epochs):
        total = 0.0
        for seq in dataset:
            zero_grad(params)
            loss = sequence_loss(seq, model, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite stage-2 loss in epoch {epoch}")
            loss.backward()
            optimizer_step(params, opt)
            total += value
        mean_loss = total / len(dataset)
        losses.append(mean_loss)
        if mean_loss < best:
            best, best_state = mean_loss, model.state_dict()
        if on_epoch:
            on_epoch(epoch, mean_loss)
    model.load_state_dict(best_state)
    return Stage2Result(losses, best, best_state)


def evaluate_sequence_loss(dataset, model: TemporalModel) -> float:
    with no_grad():
        return float(np.mean([sequence_loss(s, model).item() for s in dataset]))
