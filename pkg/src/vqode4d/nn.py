"""Tiny parameter containers built on the autodiff engine."""
from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import DTYPE, Tensor, group_norm, leaky_relu
from .conv import conv3d, conv_transpose3d


class CheckpointError(ValueError):
    pass


class Module:
    """Attribute-walking parameter registry, in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, tensors: dict[str, np.ndarray], prefix: str = "", strict: bool = True):
        own = dict(self.named_parameters())
        wanted = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        unknown = sorted(set(wanted) - set(own))
        if unknown and strict:
            raise CheckpointError(f"unknown tensor {prefix}{unknown[0]}")
        missing = sorted(set(own) - set(wanted))
        if missing:
            raise CheckpointError(f"missing tensor {prefix}{missing[0]}")
        for k, p in own.items():
            v = np.asarray(wanted[k])
            if v.shape != p.shape:
                raise CheckpointError(f"tensor {prefix}{k} has shape {v.shape}, model expects {p.shape}")
            p.data = np.ascontiguousarray(v, dtype=DTYPE)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, p in self.named_parameters():
            h.update(k.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def _uniform(rng, shape, bound):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None, bias=True):
        rng = rng or np.random.default_rng(0)
        k = _triple(kernel)
        bound = 1.0 / np.sqrt(cin * np.prod(k))
        self.weight = _uniform(rng, (cout, cin, *k), bound)
        self.bias = _uniform(rng, (cout,), bound) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None):
        rng = rng or np.random.default_rng(0)
        k = _triple(kernel)
        bound = 1.0 / np.sqrt(cout * np.prod(k))
        self.weight = _uniform(rng, (cin, cout, *k), bound)
        self.bias = _uniform(rng, (cout,), bound)
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding)


def _groups_for(c, target=8):
    g = min(target, c)
    while c % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels, groups=None):
        self.groups = groups or _groups_for(channels)
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return group_norm(x, self.gamma, self.beta, self.groups)


class ResBlock(Module):
    def __init__(self, channels, rng):
        self.norm1 = GroupNorm(channels)
        self.conv1 = Conv3d(channels, channels, 3, padding=1, rng=rng)
        self.norm2 = GroupNorm(channels)
        self.conv2 = Conv3d(channels, channels, 3, padding=1, rng=rng)

    def __call__(self, x):
        h = self.conv1(leaky_relu(self.norm1(x)))
        h = self.conv2(leaky_relu(self.norm2(h)))
        return x + h
