import math

import numpy as np
import pytest

from vqode4d.autodiff import DimensionError, Tensor
from vqode4d.optim import adam
from vqode4d.phantom import PhantomConfig, generate_cohort
from vqode4d.vqgan import (Discriminators, EncoderDecoderConfig, NonFiniteLossError, StageOneLossWeights,
                           StageOneTrainer, VQGAN3D, decode, discriminator_slice_pick, encode, gan_loss,
                           gan_objective, stage1_train_step)

SMALL = EncoderDecoderConfig(base_channels=4, compression_rate=4, embed_dim=4, num_codes=16, input_shape=(16, 16, 16))


def logit(p):
    return Tensor(np.full((1, 1, 2, 2, 2), math.log(p / (1 - p))))


def test_latent_shapes():
    assert EncoderDecoderConfig().latent_shape == (8, 8, 8)
    full = EncoderDecoderConfig(input_shape=(96, 256, 256))
    assert full.latent_shape == (24, 64, 64)


def test_encode_decode_shapes_and_range():
    model = VQGAN3D(SMALL, seed=0)
    x = np.random.default_rng(0).random((1, 1, 16, 16, 16))
    z = encode(x, model)
    assert z.shape == (4, 4, 4, 4)
    y = decode(z, model)
    assert y.shape == (1, 1, 16, 16, 16)
    assert y.data.min() >= 0.0 and y.data.max() <= 1.0


def test_encode_is_deterministic():
    model = VQGAN3D(SMALL, seed=0)
    x = np.random.default_rng(1).random((1, 1, 16, 16, 16))
    assert np.array_equal(encode(x, model).data, encode(x, model).data)


def test_mismatched_volume_rejected():
    with pytest.raises(DimensionError):
        encode(np.zeros((1, 1, 16, 16, 8)), VQGAN3D(SMALL))


def test_compression_rate_must_divide_input():
    with pytest.raises(ValueError):
        EncoderDecoderConfig(compression_rate=4, input_shape=(30, 32, 32))


def test_gan_objective_at_half():
    assert gan_objective(logit(0.5), logit(0.5)).item() == pytest.approx(2 * math.log(0.5), abs=1e-6)


def test_gan_objective_perfect_discriminator_tends_to_zero():
    assert gan_objective(Tensor(np.full(4, 40.0)), Tensor(np.full(4, -40.0))).item() == pytest.approx(0.0, abs=1e-5)


def test_generator_loss_decreases_as_fake_probability_rises():
    values = [gan_loss(None, logit(p), "generator").item() for p in np.linspace(0.05, 0.95, 19)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_gan_loss_rejects_unknown_side():
    with pytest.raises(ValueError):
        gan_loss(logit(0.5), logit(0.5), "critic")


def test_slice_pick_reproducible_and_in_range():
    vol = np.zeros((1, 1, 12, 4, 4))
    a = [discriminator_slice_pick(vol, np.random.default_rng(3)) for _ in range(3)]
    assert len(set(a)) == 1
    rng = np.random.default_rng(0)
    draws = np.array([discriminator_slice_pick(vol, rng) for _ in range(10_000)])
    assert draws.min() >= 0 and draws.max() < 12
    counts = np.bincount(draws, minlength=12)
    expected = 10_000 / 12
    assert counts.min() > expected / 5 and counts.max() < expected * 5


def test_default_loss_weights():
    w = StageOneLossWeights()
    assert (w.lambda_rec, w.lambda_perc, w.lambda_gan) == (4.0, 4.0, 1.0)


def test_step_with_gan_off_leaves_discriminators_untouched():
    trainer = StageOneTrainer(VQGAN3D(SMALL), Discriminators(), StageOneLossWeights(lambda_gan=0.0, gan_start_step=0))
    before = trainer.discriminators.fingerprint()
    gen_before = trainer.model.fingerprint()
    terms = trainer.train_step([np.random.default_rng(0).random((1, 1, 16, 16, 16))])
    assert trainer.discriminators.fingerprint() == before
    assert trainer.model.fingerprint() != gen_before
    assert terms["l_gan_d2"] == terms["l_gan_d3"] == 0.0


def test_step_with_gan_on_updates_both_players():
    trainer = StageOneTrainer(VQGAN3D(SMALL), Discriminators(), StageOneLossWeights(gan_start_step=0))
    d_before = trainer.discriminators.fingerprint()
    terms = trainer.train_step([np.random.default_rng(0).random((1, 1, 16, 16, 16))])
    assert trainer.discriminators.fingerprint() != d_before
    assert all(math.isfinite(v) for v in terms.values())
    assert terms["l_gan_g"] > 0 and terms["l_gan_d2"] > 0 and terms["l_gan_d3"] > 0


def test_non_finite_loss_aborts_with_terms():
    trainer = StageOneTrainer(VQGAN3D(SMALL), Discriminators())
    bad = np.full((1, 1, 16, 16, 16), np.nan)
    with pytest.raises((NonFiniteLossError, ValueError)) as err:
        stage1_train_step([bad], trainer)
    assert "l_rec" in str(err.value) or "non-finite" in str(err.value)


def test_two_hundred_steps_halve_reconstruction_at_16_cubed():
    cohort = generate_cohort(PhantomConfig(n_subjects=4, volume_dim=16, seed=3))
    vols = [sc.volume.reshape(1, 1, 16, 16, 16) for s in cohort for sc in s.scans][:8]
    cfg = EncoderDecoderConfig(base_channels=8, embed_dim=8, num_codes=64, input_shape=(16, 16, 16))
    trainer = StageOneTrainer(VQGAN3D(cfg, seed=0), Discriminators(), StageOneLossWeights(), adam(2e-3), adam(2e-3))
    rec = [trainer.train_step([vols[i % len(vols)]])["l_rec"] for i in range(200)]
    assert np.mean(rec[-8:]) < 0.5 * rec[0]
