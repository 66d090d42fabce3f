"""Codebook, nearest-neighbour quantisation and the VQ loss terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import (DTYPE, DimensionError, Tensor, add, as_tensor, gather_rows, l1_loss, l2_loss,
                       mul, stop_gradient, straight_through)
from .nn import Module


class Codebook(Module):
    """M trainable embedding vectors of length ``embed_dim``."""

    def __init__(self, num_codes: int, embed_dim: int, rng=None):
        if num_codes < 2 or embed_dim < 1:
            raise ValueError(f"codebook needs M >= 2 and embed_dim >= 1, got {num_codes}, {embed_dim}")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / num_codes
        self.entries = Tensor(rng.uniform(-bound, bound, size=(num_codes, embed_dim)), requires_grad=True)

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class QuantizedLatent:
    indices: np.ndarray  # int64 [d, h, w]
    embeddings: Tensor  # [d, h, w, embed_dim], rows of the codebook


@dataclass(frozen=True)
class VqLossWeights:
    beta: float = 0.25

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"commitment weight must be positive, got {self.beta}")


@dataclass
class VqLoss:
    total: Tensor
    reconstruction: Tensor
    codebook: Tensor
    commitment: Tensor


def nearest_indices(vectors: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Row-wise argmin of squared Euclidean distance; ties go to the lowest index."""
    v = vectors.astype(np.float64)
    t = table.astype(np.float64)
    d2 = (v * v).sum(1, keepdims=True) - 2.0 * v @ t.T + (t * t).sum(1)[None, :]
    best = d2.argmin(axis=1)
    # the expanded form can misorder near-ties; settle them with exact differences
    close = d2 <= d2[np.arange(len(v)), best][:, None] + 1e-9 * (1.0 + np.abs(d2).max(axis=1, keepdims=True))
    for row in np.flatnonzero(close.sum(1) > 1):
        cand = np.flatnonzero(close[row])
        exact = ((t[cand] - v[row]) ** 2).sum(1)
        best[row] = cand[np.flatnonzero(exact == exact.min())[0]]
    return best


def quantize(z_hat, codebook: Codebook) -> tuple[QuantizedLatent, Tensor]:
    """Replace each spatial code with its nearest codebook entry.

    Returns the quantised latent (embeddings differentiable w.r.t. the
    codebook only) and the straight-through decoder input, whose value is the
    quantised embedding grid and whose gradient flows unchanged to ``z_hat``.
    """
    z_hat = as_tensor(z_hat)
    table = codebook.entries
    if table.shape[0] == 0:
        raise ValueError("empty codebook")
    if z_hat.ndim != 4 or z_hat.shape[-1] != table.shape[1]:
        raise DimensionError(f"latent {z_hat.shape} does not end in embed_dim={table.shape[1]}")
    if not np.isfinite(z_hat.data).all():
        raise ValueError("latent contains non-finite values")
    grid = z_hat.shape[:3]
    idx = nearest_indices(z_hat.data.reshape(-1, table.shape[1]), table.data).reshape(grid)
    z_q = gather_rows(table, idx)
    return QuantizedLatent(idx, z_q), straight_through(z_hat, z_q)


def vq_loss(x, x_hat, z_hat, z_q, weights: VqLossWeights = VqLossWeights()) -> VqLoss:
    """L1 reconstruction + codebook term + beta * commitment term.

    The codebook term only moves codebook entries and the commitment term only
    moves the encoder output, through stop-gradients.
    """
    x, x_hat, z_hat, z_q = map(as_tensor, (x, x_hat, z_hat, z_q))
    if x.shape != x_hat.shape:
        raise DimensionError(f"x {x.shape} vs x_hat {x_hat.shape}")
    if z_hat.shape != z_q.shape:
        raise DimensionError(f"z_hat {z_hat.shape} vs z_q {z_q.shape}")
    rec = l1_loss(x, x_hat)
    cb = l2_loss(stop_gradient(z_hat), z_q)
    commit = l2_loss(stop_gradient(z_q), z_hat)
    total = add(add(rec, cb), mul(commit, weights.beta))
    return VqLoss(total, rec, cb, commit)


def code_frequencies(indices, num_codes: int, mask=None) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= num_codes):
        raise ValueError(f"indices outside [0, {num_codes})")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != idx.shape:
            raise DimensionError(f"mask {mask.shape} vs indices {idx.shape}")
        idx = idx[mask]
    if idx.size == 0:
        raise ValueError("no voxels selected for code frequencies")
    counts = np.bincount(idx.reshape(-1), minlength=num_codes)
    return counts / counts.sum()


@dataclass
class CodebookUsage:
    perplexity: float
    dead_codes: list[int]
    counts: np.ndarray


def codebook_usage(index_grids: Iterable[np.ndarray], num_codes: int) -> CodebookUsage:
    counts = np.zeros(num_codes, dtype=np.int64)
    n_grids = 0
    for grid in index_grids:
        counts += np.bincount(np.asarray(grid).reshape(-1), minlength=num_codes)
        n_grids += 1
    if n_grids == 0:
        raise ValueError("codebook_usage needs at least one index grid")
    p = counts[counts > 0] / counts.sum()
    entropy = float(-(p * np.log(p)).sum())
    return CodebookUsage(float(np.exp(entropy)), [int(i) for i in np.flatnonzero(counts == 0)], counts)


def single_code_latent(code_index: int, latent_shape, codebook: Codebook) -> QuantizedLatent:
    """A latent that uses one code everywhere (for visualising that code)."""
    if not 0 <= code_index < codebook.num_codes:
        raise IndexError(f"code {code_index} outside [0, {codebook.num_codes})")
    idx = np.full(tuple(latent_shape), code_index, dtype=np.int64)
    return QuantizedLatent(idx, Tensor(codebook.entries.data[idx]))


def export_codebook_csv(codebook: Codebook, path) -> None:
    e = codebook.entries.data
    header = "code_index," + ",".join(f"dim_{j}" for j in range(e.shape[1]))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i, row in enumerate(e):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")


def export_frequencies_csv(freqs: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write("code_index,frequency\n")
        for i, f in enumerate(freqs):
            fh.write(f"{i},{float(f)!r}\n")


__all__ = [
    "Codebook", "QuantizedLatent", "VqLossWeights", "VqLoss", "quantize", "vq_loss",
    "code_frequencies", "codebook_usage", "single_code_latent", "nearest_indices", "DTYPE",
]
