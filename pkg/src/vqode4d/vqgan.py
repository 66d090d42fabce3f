"""Stage 1: volumetric VQ autoencoder with 2-D/3-D patch discriminators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (DimensionError, Tensor, abs_, add, as_tensor, clip, leaky_relu, log, mean, mul,
                       no_grad, permute, sigmoid, stop_gradient, sub)
from .conv import conv3d
from .nn import Conv3d, ConvTranspose3d, GroupNorm, Module, ResBlock
from .optim import OptimizerState, adam, optimizer_step, zero_grad
from .vq import Codebook, QuantizedLatent, quantize, vq_loss

PROB_EPS = 1e-6


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class EncoderDecoderConfig:
    in_channels: int = 1
    base_channels: int = 16
    compression_rate: int = 4
    embed_dim: int = 8
    num_codes: int = 64
    input_shape: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        r = self.compression_rate
        if r < 2 or r & (r - 1):
            raise ValueError(f"compression rate must be a power of two >= 2, got {r}")
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if any(s % r for s in self.input_shape):
            raise ValueError(f"compression rate {r} does not divide input shape {self.input_shape}")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return tuple(s // self.compression_rate for s in self.input_shape)

    @property
    def levels(self) -> int:
        return int(round(math.log2(self.compression_rate)))


@dataclass
class StageOneLossWeights:
    lambda_rec: float = 4.0
    lambda_perc: float = 4.0
    lambda_gan: float = 1.0
    beta: float = 0.25
    gan_start_step: int = 500

    def __post_init__(self):
        for k in ("lambda_rec", "lambda_perc", "lambda_gan", "beta"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.gan_start_step < 0:
            raise ValueError("gan_start_step must be >= 0")


def _level_channels(cfg: EncoderDecoderConfig) -> list[int]:
    return [cfg.base_channels * 2 ** i for i in range(cfg.levels)]


class Encoder(Module):
    def __init__(self, cfg: EncoderDecoderConfig, rng):
        chans = _level_channels(cfg)
        self.downs = []
        self.norms = []
        cin = cfg.in_channels
        for c in chans:
            self.downs.append(Conv3d(cin, c, 4, stride=2, padding=1, rng=rng))
            self.norms.append(GroupNorm(c))
            cin = c
        self.mid = ResBlock(cin, rng)
        self.proj = Conv3d(cin, cfg.embed_dim, 1, rng=rng)

    def __call__(self, x):
        h = x
        for conv, norm in zip(self.downs, self.norms):
            h = leaky_relu(norm(conv(h)))
        return self.proj(self.mid(h))


class Decoder(Module):
    def __init__(self, cfg: EncoderDecoderConfig, rng):
        chans = _level_channels(cfg)[::-1]
        self.proj = Conv3d(cfg.embed_dim, chans[0], 3, padding=1, rng=rng)
        self.mid = ResBlock(chans[0], rng)
        self.ups = []
        self.norms = []
        cin = chans[0]
        for c in chans[1:] + [chans[-1]]:
            self.ups.append(ConvTranspose3d(cin, c, 4, stride=2, padding=1, rng=rng))
            self.norms.append(GroupNorm(c))
            cin = c
        self.out = Conv3d(cin, cfg.in_channels, 3, padding=1, rng=rng)

    def __call__(self, z):
        h = self.mid(self.proj(z))
        for up, norm in zip(self.ups, self.norms):
            h = leaky_relu(norm(up(h)))
        return sigmoid(self.out(h))


class PatchDiscriminator(Module):
    """Three strided convs to a grid of real/fake logits.

    With ``planar=True`` it works on single axial slices shaped [N, C, 1, H, W].
    """

    def __init__(self, in_channels=1, width=8, planar=False, rng=None):
        k4 = (1, 4, 4) if planar else 4
        s2 = (1, 2, 2) if planar else 2
        p1 = (0, 1, 1) if planar else 1
        k3 = (1, 3, 3) if planar else 3
        self.conv1 = Conv3d(in_channels, width, k4, s2, p1, rng=rng)
        self.conv2 = Conv3d(width, 2 * width, k4, s2, p1, rng=rng)
        self.conv3 = Conv3d(2 * width, 1, k3, 1, p1, rng=rng)

    def __call__(self, x):
        h = leaky_relu(self.conv1(x))
        h = leaky_relu(self.conv2(h))
        return self.conv3(h)


class FeatureExtractor:
    """Fixed random two-layer conv features, a stand-in for a pretrained perceptual net."""

    def __init__(self, in_channels=1, seed=1234):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.standard_normal((4, in_channels, 3, 3, 3)) / np.sqrt(27 * in_channels))
        self.w2 = Tensor(rng.standard_normal((8, 4, 3, 3, 3)) / np.sqrt(27 * 4))

    def __call__(self, x):
        h = leaky_relu(conv3d(x, self.w1, padding=1))
        return leaky_relu(conv3d(h, self.w2, stride=2, padding=1))


class VQGAN3D(Module):
    def __init__(self, cfg: EncoderDecoderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        self.codebook = Codebook(cfg.num_codes, cfg.embed_dim, rng)
        self.decoder = Decoder(cfg, rng)


class Discriminators(Module):
    def __init__(self, in_channels=1, width=8, seed=1):
        rng = np.random.default_rng(seed)
        self.d2 = PatchDiscriminator(in_channels, width, planar=True, rng=rng)
        self.d3 = PatchDiscriminator(in_channels, width, planar=False, rng=rng)


def _check_volume(x: Tensor, cfg: EncoderDecoderConfig):
    want = (cfg.in_channels, *cfg.input_shape)
    if x.ndim != 5 or x.shape[1:] != want:
        raise DimensionError(f"volume shape {x.shape} does not match config [N, {want}]")


def encode(x, model: VQGAN3D) -> Tensor:
    """Volume [1, C, D, H, W] -> continuous latent [d, h, w, embed_dim]."""
    x = as_tensor(x)
    _check_volume(x, model.config)
    if x.shape[0] != 1:
        raise DimensionError("encode takes a single volume")
    z = model.encoder(x)  # 1, E, d, h, w
    return permute(z.reshape(z.shape[1:]), (1, 2, 3, 0))


def decode(z_q, model: VQGAN3D) -> Tensor:
    """Latent [d, h, w, embed_dim] -> volume [1, C, D, H, W] in [0, 1]."""
    z_q = as_tensor(z_q)
    cfg = model.config
    if z_q.shape != (*cfg.latent_shape, cfg.embed_dim):
        raise DimensionError(f"latent shape {z_q.shape} does not match {(*cfg.latent_shape, cfg.embed_dim)}")
    z = permute(z_q, (3, 0, 1, 2))
    return model.decoder(z.reshape((1, *z.shape)))


def encode_quantized(x, model: VQGAN3D) -> QuantizedLatent:
    with no_grad():
        q, _ = quantize(encode(x, model), model.codebook)
    return q


def reconstruct(x, model: VQGAN3D) -> np.ndarray:
    with no_grad():
        q, _ = quantize(encode(x, model), model.codebook)
        return decode(q.embeddings, model).data


def _bce_terms(logits, target_real: bool):
    p = clip(sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    return mean(log(p)) if target_real else mean(log(sub(1.0, p)))


def gan_objective(d_real_logits, d_fake_logits) -> Tensor:
    """mean log D(x) + mean log(1 - D(x_hat)); the discriminator maximises this."""
    return add(_bce_terms(d_real_logits, True), _bce_terms(d_fake_logits, False))


def gan_loss(d_real_logits, d_fake_logits, side: str) -> Tensor:
    """Quantity to *minimise* for the given side.

    discriminator: the negated objective; generator: the non-saturating
    ``-log D(x_hat)`` (``d_real_logits`` is ignored and may be None).
    """
    if side == "discriminator":
        return mul(gan_objective(d_real_logits, d_fake_logits), -1.0)
    if side == "generator":
        return mul(_bce_terms(d_fake_logits, True), -1.0)
    raise ValueError(f"side must be 'discriminator' or 'generator', got {side!r}")


def discriminator_slice_pick(volume, rng: np.random.Generator) -> int:
    depth = as_tensor(volume).shape[2]
    if depth == 0:
        raise ValueError("empty volume")
    return int(rng.integers(0, depth))


def _axial(x, k):
    return x[:, :, k:k + 1]


@dataclass
class StageOneTrainer:
    model: VQGAN3D
    discriminators: Discriminators
    weights: StageOneLossWeights = field(default_factory=StageOneLossWeights)
    gen_opt: OptimizerState = field(default_factory=adam)
    disc_opt: OptimizerState = field(default_factory=adam)
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.features = FeatureExtractor(self.model.config.in_channels)

    @property
    def gan_active(self) -> bool:
        return self.weights.lambda_gan > 0 and self.step >= self.weights.gan_start_step

    def train_step(self, batch) -> dict[str, float]:
        return stage1_train_step(batch, self)


def _perceptual(features, x, x_hat):
    with no_grad():
        fx = features(x)
    return mean(abs_(sub(features(x_hat), fx)))


def stage1_train_step(batch, trainer: StageOneTrainer) -> dict[str, float]:
    """One generator update (gradients accumulated over ``batch``), then, once
    the GAN is active, one discriminator update on the last volume."""
    model, discs, w = trainer.model, trainer.discriminators, trainer.weights
    batch = [as_tensor(v) for v in batch]
    gen_params = model.parameters()
    disc_params = discs.parameters()
    gan_on = trainer.gan_active
    zero_grad(gen_params)
    zero_grad(disc_params)
    terms = {k: 0.0 for k in ("l_rec", "l_codebook", "l_commit", "l_perc", "l_gan_g", "l_gan_d2", "l_gan_d3")}
    scale = 1.0 / len(batch)
    k = None
    last = None
    for x in batch:
        z_hat = encode(x, model)
        q, z_in = quantize(z_hat, model.codebook)
        x_hat = decode(z_in, model)
        parts = vq_loss(x, x_hat, z_hat, q.embeddings)
        total = add(add(mul(parts.reconstruction, w.lambda_rec), parts.codebook), mul(parts.commitment, w.beta))
        terms["l_rec"] += parts.reconstruction.item() * scale
        terms["l_codebook"] += parts.codebook.item() * scale
        terms["l_commit"] += parts.commitment.item() * scale
        if w.lambda_perc > 0:
            perc = _perceptual(trainer.features, x, x_hat)
            total = add(total, mul(perc, w.lambda_perc))
            terms["l_perc"] += perc.item() * scale
        if gan_on:
            k = discriminator_slice_pick(x, trainer.rng)
            g2 = gan_loss(None, discs.d2(_axial(x_hat, k)), "generator")
            g3 = gan_loss(None, discs.d3(x_hat), "generator")
            g = add(g2, g3)
            total = add(total, mul(g, w.lambda_gan))
            terms["l_gan_g"] += g.item() * scale
        _guard(total, terms)
        mul(total, scale).backward()
        last = (x, x_hat, k)
    optimizer_step(gen_params, trainer.gen_opt)
    zero_grad(disc_params)
    if gan_on:
        x, x_hat, k = last
        fake = stop_gradient(x_hat)
        d2 = gan_loss(discs.d2(_axial(x, k)), discs.d2(_axial(fake, k)), "discriminator")
        d3 = gan_loss(discs.d3(x), discs.d3(fake), "discriminator")
        terms["l_gan_d2"] = d2.item()
        terms["l_gan_d3"] = d3.item()
        d_total = mul(add(d2, d3), w.lambda_gan)
        _guard(d_total, terms)
        d_total.backward()
        optimizer_step(disc_params, trainer.disc_opt)
    trainer.step += 1
    return terms


def _guard(total: Tensor, terms: dict):
    if not np.isfinite(total.data).all():
        dump = ", ".join(f"{k}={v:.4g}" for k, v in terms.items())
        raise NonFiniteLossError(f"non-finite stage-1 loss at this step; terms: {dump}")


def total_from_terms(terms: dict, w: StageOneLossWeights) -> float:
    return (w.lambda_rec * terms["l_rec"] + terms["l_codebook"] + w.beta * terms["l_commit"]
            + w.lambda_perc * terms["l_perc"] + w.lambda_gan * terms["l_gan_g"])
