import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqode4d.autodiff import Tensor, sum_
from vqode4d.vq import (Codebook, VqLossWeights, code_frequencies, codebook_usage, export_codebook_csv,
                        export_frequencies_csv, quantize, single_code_latent, vq_loss)


def make_codebook(table) -> Codebook:
    cb = Codebook(*np.shape(table))
    cb.entries = Tensor(table, requires_grad=True)
    return cb


def brute_force_nearest(z, table):
    """Scan every entry per voxel; strict '<' keeps the lowest index on ties."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(table, dtype=np.float64)
    out = np.zeros(z.shape[:-1], dtype=np.int64)
    for pos in np.ndindex(*z.shape[:-1]):
        best, best_d = 0, math.inf
        for k in range(len(t)):
            d = float(((z[pos] - t[k]) ** 2).sum())
            if d < best_d:
                best, best_d = k, d
        out[pos] = best
    return out


def random_case(seed):
    """Even seeds: small-integer lattices, which produce many exact ties."""
    rng = np.random.default_rng(seed)
    m, e = int(rng.integers(2, 12)), int(rng.integers(1, 5))
    shape = tuple(int(s) for s in rng.integers(1, 4, size=3))
    if seed % 2 == 0:
        table = rng.integers(-2, 3, size=(m, e)).astype(np.float32)
        z = rng.integers(-2, 3, size=(*shape, e)).astype(np.float32) + rng.choice([0, 0.5], size=(*shape, e))
    else:
        table = rng.normal(size=(m, e)).astype(np.float32)
        z = rng.normal(size=(*shape, e)).astype(np.float32)
    return table, z.astype(np.float32)


def test_nearest_by_inspection():
    q, _ = quantize(Tensor(np.array([0.1, 0.2]).reshape(1, 1, 1, 2)), make_codebook([[0, 0], [1, 1]]))
    assert q.indices.item() == 0
    assert np.array_equal(q.embeddings.data.reshape(-1), [0, 0])


def test_equidistant_voxel_takes_lowest_index():
    table = np.array([[5.0, 5.0], [1.0, 0.0], [9.0, 9.0], [-1.0, 0.0]])
    q, _ = quantize(Tensor(np.zeros((1, 1, 1, 2))), make_codebook(table))
    assert q.indices.item() == 1


@pytest.mark.parametrize("seed", range(100))
def test_matches_exhaustive_search(seed):
    table, z = random_case(seed)
    q, _ = quantize(Tensor(z), make_codebook(table))
    assert np.array_equal(q.indices, brute_force_nearest(z, table))
    assert np.array_equal(q.embeddings.data, table[q.indices])


def test_straight_through_gradient_is_all_ones():
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(2, 3, 2, 4)), requires_grad=True)
    _, z_in = quantize(z, make_codebook(rng.normal(size=(6, 4))))
    sum_(z_in).backward()
    assert np.array_equal(z.grad, np.ones(z.shape))


def test_decoder_input_value_is_exactly_the_codebook_row():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(5, 3)).astype(np.float32)
    q, z_in = quantize(Tensor(rng.normal(size=(2, 2, 2, 3))), make_codebook(table))
    assert np.array_equal(z_in.data, table[q.indices])


def test_loss_zero_on_perfect_reconstruction():
    x = Tensor(np.full((1, 1, 2, 2, 2), 0.3))
    z = Tensor(np.ones((1, 1, 1, 2)))
    assert vq_loss(x, x, z, z).total.item() == 0.0


def test_scalar_loss_fixture_is_six():
    one = lambda v: Tensor(np.full((1, 1, 1, 1), v))  # noqa: E731
    loss = vq_loss(Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1, 1))), one(2.0), one(0.0),
                   VqLossWeights(beta=0.25))
    assert loss.total.item() == 6.0


def test_beta_must_be_positive():
    with pytest.raises(ValueError):
        VqLossWeights(beta=0.0)


def test_commitment_term_sends_no_gradient_to_codebook():
    rng = np.random.default_rng(2)
    cb = make_codebook(rng.normal(size=(4, 3)))
    z = Tensor(rng.normal(size=(2, 2, 1, 3)), requires_grad=True)
    x = Tensor(np.zeros((1, 1, 2, 2, 2)))
    q, _ = quantize(z, cb)
    vq_loss(x, x, z, q.embeddings).commitment.backward()
    assert cb.entries.grad is None or not cb.entries.grad.any()
    assert z.grad is not None and z.grad.any()

    cb.entries.grad, z.grad = None, None
    q, _ = quantize(z, cb)
    vq_loss(x, x, z, q.embeddings).codebook.backward()
    assert cb.entries.grad.any()
    assert z.grad is None or not z.grad.any()


def test_vq_loss_gradients_match_closed_form():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(4, 2)).astype(np.float32)
    cb = make_codebook(table)
    z = Tensor(rng.normal(size=(1, 2, 1, 2)), requires_grad=True)
    x = Tensor(np.zeros((1, 1, 4, 4, 4)))
    q, _ = quantize(z, cb)
    vq_loss(x, x, z, q.embeddings, VqLossWeights(0.25)).total.backward()
    n = z.size
    diff = z.data - table[q.indices]
    assert np.allclose(z.grad, 0.25 * 2 * diff / n, atol=1e-7)
    expect = np.zeros_like(table)
    np.add.at(expect, q.indices.reshape(-1), (-2 * diff / n).reshape(-1, 2))
    assert np.allclose(cb.entries.grad, expect, atol=1e-7)


def test_frequencies_by_counting():
    assert np.array_equal(code_frequencies(np.array([0, 0, 0, 1]), 2), [0.75, 0.25])
    assert np.array_equal(code_frequencies(np.full((2, 2, 2), 3), 5), [0, 0, 0, 1, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_frequencies_match_recount(m, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, m, size=(3, 4, 2))
    mask = rng.random((3, 4, 2)) < 0.7
    mask[0, 0, 0] = True
    got = code_frequencies(idx, m, mask)
    selected = [int(v) for v, keep in zip(idx.reshape(-1), mask.reshape(-1)) if keep]
    want = np.array([selected.count(k) for k in range(m)]) / len(selected)
    assert np.array_equal(got, want)
    assert got.sum() == pytest.approx(1.0)


def test_perplexity_bounds_and_dead_codes():
    uniform = codebook_usage([np.arange(8)], 8)
    assert uniform.perplexity == pytest.approx(8.0)
    assert uniform.dead_codes == []
    single = codebook_usage([np.zeros(10, dtype=int)], 8)
    assert single.perplexity == pytest.approx(1.0)
    assert len(single.dead_codes) == 7


def test_perplexity_of_mixed_histogram():
    grid = np.array([0] * 5 + [1] * 3 + [2] * 2)
    p = np.array([0.5, 0.3, 0.2])
    assert codebook_usage([grid], 4).perplexity == pytest.approx(math.exp(-(p * np.log(p)).sum()))


def test_single_code_latent_is_a_fixed_point():
    cb = Codebook(6, 3, np.random.default_rng(4))
    lat = single_code_latent(0, (2, 2, 2), cb)
    assert not lat.indices.any()
    assert np.array_equal(lat.embeddings.data, np.broadcast_to(cb.entries.data[0], (2, 2, 2, 3)))
    for k in range(6):
        lat = single_code_latent(k, (2, 2, 2), cb)
        q, _ = quantize(lat.embeddings, cb)
        assert (q.indices == k).all()
        assert code_frequencies(q.indices, 6)[k] == 1.0


def test_csv_exports(tmp_path):
    cb = Codebook(3, 2, np.random.default_rng(5))
    export_codebook_csv(cb, tmp_path / "cb.csv")
    lines = (tmp_path / "cb.csv").read_text().splitlines()
    assert lines[0] == "code_index,dim_0,dim_1" and len(lines) == 4
    assert float(lines[1].split(",")[1]) == float(cb.entries.data[0, 0])
    export_frequencies_csv(np.array([0.5, 0.5]), tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines() == ["code_index,frequency", "0,0.5", "1,0.5"]
