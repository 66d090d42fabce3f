"""Finite-difference cases for every differentiable op, shared by the unit and acceptance suites.

Each case builds float32 inputs (at most 500 elements each) away from kinks,
and the checked scalar is ``sum(op(...) * R)`` for a fixed random ``R`` so the
upstream gradient is not uniform.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np

from vqode4d import autodiff as ad
from vqode4d.autodiff import Tensor
from vqode4d.conv import conv3d, conv_transpose3d
from vqode4d.temporal import ConvGRUCell, OdeFunc, OdeSolverConfig, Projector, integrate

REL_TOL = 1e-3


@dataclass
class GradCase:
    name: str
    make: Callable[[np.random.Generator], list]  # returns the input tensors
    op: Callable[..., Tensor]
    # differentiable stand-in whose true derivative the op's gradient should equal
    surrogate: Callable[..., Tensor] | None = None


def _away(rng, shape, margin=0.15):
    """Uniform values with |x| >= margin, clear of kinks at zero."""
    u = rng.uniform(margin, 1.0, size=shape)
    return u * rng.choice([-1.0, 1.0], size=shape)


def _t(a):
    return Tensor(a, requires_grad=True)


def _n(rng, *shape, scale=1.0):
    return _t(rng.normal(0.0, scale, size=shape))


_MASK = np.random.default_rng(11).random((3, 4)) < 0.6
_MASK[0, 0] = True
_GATHER = np.array([[0, 2, 2], [4, 1, 0]])
_cell_rng = np.random.default_rng(5)
_CELL = ConvGRUCell(2, 3, _cell_rng)
_ODE = OdeFunc(3, _cell_rng)
_PROJ = Projector(3, 2, 2, _cell_rng)


def _cell_op(h, z):
    return _CELL(h, z)


def _ode_op(h):
    return integrate(_ODE, h, 0.0, 0.3, OdeSolverConfig("rk4", 0.125))


CASES = [
    GradCase("add", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.add),
    GradCase("add_scalar_broadcast", lambda r: [_n(r, 3, 4), _n(r)], ad.add),
    GradCase("sub", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.sub),
    GradCase("mul", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.mul),
    GradCase("mul_scalar_broadcast", lambda r: [_n(r), _n(r, 2, 5)], ad.mul),
    GradCase("div_constant", lambda r: [_n(r, 6)], lambda x: x / 3.0),
    GradCase("neg", lambda r: [_n(r, 6)], lambda x: -x),
    GradCase("where", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], lambda a, b: ad.where(_MASK, a, b)),
    GradCase("concat", lambda r: [_n(r, 1, 2, 3), _n(r, 1, 3, 3)], lambda a, b: ad.concat([a, b], axis=1)),
    GradCase("sigmoid", lambda r: [_n(r, 10, scale=3)], ad.sigmoid),
    GradCase("tanh", lambda r: [_n(r, 10, scale=1.5)], ad.tanh),
    GradCase("relu", lambda r: [_t(_away(r, (10,)))], ad.relu),
    GradCase("leaky_relu", lambda r: [_t(_away(r, (10,)))], ad.leaky_relu),
    GradCase("log", lambda r: [_t(r.uniform(0.5, 2.0, 10))], ad.log),
    GradCase("exp", lambda r: [_n(r, 10)], ad.exp),
    GradCase("square", lambda r: [_n(r, 10)], ad.square),
    GradCase("abs", lambda r: [_t(_away(r, (10,)))], ad.abs_),
    GradCase("clip", lambda r: [_t(np.concatenate([r.uniform(-0.4, 0.4, 6), r.uniform(0.7, 1.5, 4)]))],
             lambda x: ad.clip(x, -0.5, 0.5)),
    GradCase("straight_through", lambda r: [_n(r, 8)], lambda x: ad.straight_through(x, Tensor(np.round(x.data))), surrogate=lambda x: x),
    GradCase("sum", lambda r: [_n(r, 3, 4)], ad.sum_),
    GradCase("mean", lambda r: [_n(r, 3, 4)], ad.mean),
    GradCase("masked_mean", lambda r: [_n(r, 3, 4)], lambda x: ad.masked_mean(x, _MASK)),
    GradCase("l1_loss", lambda r: [_t(_away(r, (3, 4))), _t(np.zeros((3, 4)))], ad.l1_loss),
    GradCase("l2_loss", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], ad.l2_loss),
    GradCase("l2_loss_masked", lambda r: [_n(r, 3, 4), _n(r, 3, 4)], lambda a, b: ad.l2_loss(a, b, _MASK)),
    GradCase("reshape", lambda r: [_n(r, 3, 4)], lambda x: x.reshape(2, 6)),
    GradCase("permute", lambda r: [_n(r, 2, 3, 4)], lambda x: x.permute(2, 0, 1)),
    GradCase("getitem", lambda r: [_n(r, 4, 5)], lambda x: x[1:3, ::2]),
    GradCase("gather_rows", lambda r: [_n(r, 5, 3)], lambda t: ad.gather_rows(t, _GATHER)),
    GradCase("group_norm", lambda r: [_n(r, 2, 4, 3, 2, 2), _n(r, 4), _n(r, 4)],
             lambda x, g, b: ad.group_norm(x, g, b, groups=2)),
    GradCase("conv3d", lambda r: [_n(r, 1, 2, 5, 4, 4), _n(r, 3, 2, 3, 3, 3, scale=0.3), _n(r, 3)],
             lambda x, w, b: conv3d(x, w, b, stride=1, padding=1)),
    GradCase("conv3d_strided", lambda r: [_n(r, 1, 2, 6, 6, 4), _n(r, 2, 2, 4, 4, 4, scale=0.3)],
             lambda x, w: conv3d(x, w, stride=2, padding=1)),
    GradCase("conv3d_anisotropic", lambda r: [_n(r, 2, 1, 3, 6, 5), _n(r, 2, 1, 1, 4, 3, scale=0.3)],
             lambda x, w: conv3d(x, w, stride=(1, 2, 1), padding=(0, 1, 1))),
    GradCase("conv_transpose3d", lambda r: [_n(r, 1, 3, 3, 3, 2), _n(r, 3, 2, 4, 4, 4, scale=0.3), _n(r, 2)],
             lambda y, w, b: conv_transpose3d(y, w, b, stride=2, padding=1)),
    GradCase("convgru_cell", lambda r: [_n(r, 1, 3, 2, 3, 3, scale=0.5), _n(r, 1, 2, 2, 3, 3, scale=0.5)], _cell_op),
    GradCase("rk4_integrate", lambda r: [_n(r, 1, 3, 2, 2, 3, scale=0.5)], _ode_op),
    GradCase("projector", lambda r: [_n(r, 1, 3, 2, 2, 2), _n(r, 1, 3, 2, 2, 2)], lambda a, b: _PROJ(a, b)),
]


def run_case(case: GradCase, seed: int = 0, eps: float = 3e-3) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    inputs = case.make(rng)
    for t in inputs:
        assert t.size <= 500, f"{case.name}: input with {t.size} elements"
    with ad.no_grad():
        shape = case.op(*inputs).shape
    weights = Tensor(rng.normal(0, 1, shape))
    if case.surrogate is None:
        return ad.gradcheck(lambda *xs: ad.mul(case.op(*xs), weights), inputs, eps=eps)
    for t in inputs:
        t.grad = None
    ad.mul(case.op(*inputs), weights).sum().backward()
    worst = 0.0
    for k, t in enumerate(inputs):
        numeric = ad.numeric_grad(lambda *xs: ad.mul(case.surrogate(*xs), weights), inputs, k, eps)
        scale = max(np.linalg.norm(numeric), 1e-6)
        worst = max(worst, float(np.linalg.norm(t.grad - numeric) / scale))
    return worst
