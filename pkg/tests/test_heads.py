"""Medusa-style and early-exit heads: shape, purity, independence, training."""

import numpy as np
import pytest

from hiddentransfer.heads import (ExitHeads, HeadHyper, MedusaHeads,
                                  train_early_exit, train_medusa)
from hiddentransfer.model import ModelConfig, ModelWeights, final_norm, forward_full
from hiddentransfer.tensor import Tensor, no_grad, silu, softmax

CFG = ModelConfig(n_layers=3, d_model=32, n_heads=2, vocab_size=64,
                  max_positions=128, seed=4)


@pytest.fixture(scope="module")
def weights():
    return ModelWeights.init_random(CFG).astype(np.float64)


@pytest.fixture(scope="module")
def medusa():
    return MedusaHeads.init_random(2, CFG.d_model, CFG.vocab_size,
                                   seed=1).astype(np.float64)


@pytest.fixture(scope="module")
def exits():
    return ExitHeads.init_random((1, 2), 2, CFG.d_model, CFG.vocab_size,
                                 seed=2).astype(np.float64)


def test_medusa_distributions_valid(medusa):
    rng = np.random.default_rng(0)
    h = rng.normal(size=CFG.d_model)
    probs = medusa.draft_distributions(h)
    assert probs.shape == (2, CFG.vocab_size)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)
    assert (probs >= 0).all()


def test_medusa_manual_apply_oracle(medusa):
    rng = np.random.default_rng(1)
    h = rng.normal(size=(1, CFG.d_model))
    p = medusa.params
    wg, wu = p["medusa.step1.wg"].data, p["medusa.step1.wu"].data
    wd, wv = p["medusa.step1.wd"].data, p["medusa.step1.wv"].data
    sig = 1.0 / (1.0 + np.exp(-(h @ wg)))
    gated = (h @ wg) * sig * (h @ wu)
    expect = (h + gated @ wd) @ wv
    got = medusa.apply(h, 1).data
    assert np.allclose(got, expect, atol=1e-10)


def test_medusa_head_independence(medusa):
    """Scrambling head 2's parameters never changes head 1's output."""
    rng = np.random.default_rng(2)
    h = rng.normal(size=CFG.d_model)
    before = medusa.draft_distributions(h)[0]
    scrambled = medusa.astype(np.float64)
    for name in list(scrambled.params):
        if ".step2." in name:
            scrambled.params[name] = Tensor(
                rng.permutation(scrambled.params[name].data.reshape(-1))
                .reshape(scrambled.params[name].data.shape))
    after = scrambled.draft_distributions(h)[0]
    assert np.array_equal(before, after)


def test_medusa_step_range(medusa):
    with pytest.raises(ValueError):
        medusa.apply(np.zeros((1, CFG.d_model)), 3)


def test_exit_distributions_valid(exits):
    rng = np.random.default_rng(3)
    taps = {1: rng.normal(size=CFG.d_model), 2: rng.normal(size=CFG.d_model)}
    probs = exits.draft_distributions(taps)
    assert probs.shape == (2, CFG.vocab_size)
    assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_exit_reads_only_designated_layer(exits):
    rng = np.random.default_rng(4)
    taps = {1: rng.normal(size=CFG.d_model), 2: rng.normal(size=CFG.d_model)}
    base = exits.draft_distributions(taps)
    taps2 = dict(taps)
    taps2[2] = rng.normal(size=CFG.d_model)  # step-1 head reads layer 1 only
    assert np.array_equal(exits.draft_distributions(taps2)[0], base[0])


def test_exit_linear_oracle(exits):
    rng = np.random.default_rng(5)
    h = rng.normal(size=(1, CFG.d_model))
    w = exits.params["exit.l1.step1.w"].data
    assert np.allclose(exits.apply(h, 1).data, h @ w, atol=1e-12)


def test_exit_layer_count_mismatch():
    with pytest.raises(ValueError):
        ExitHeads.init_random((1,), 2, 8, 16)


def test_addon_purity(weights, medusa):
    """Attaching heads never changes base logits: heads read, never write."""
    rng = np.random.default_rng(6)
    toks = rng.integers(0, CFG.vocab_size, size=9)
    with no_grad():
        before = forward_full(weights, toks).logits.data
        res = forward_full(weights, toks)
        hn = final_norm(weights, Tensor(res.hidden.data[-1:])).data[0]
        medusa.draft_distributions(hn)
        after = forward_full(weights, toks).logits.data
    assert np.array_equal(before, after)


def test_round_trips(tmp_path, medusa, exits):
    p1 = medusa.save(tmp_path / "m.htc")
    m2 = MedusaHeads.load(p1)
    assert m2.k == medusa.k
    for n in medusa.params:
        assert np.array_equal(m2.params[n].data.astype(np.float64),
                              medusa.params[n].data)
    p2 = exits.save(tmp_path / "e.htc")
    e2 = ExitHeads.load(p2)
    assert e2.layers == exits.layers and e2.k == exits.k


def test_check_base():
    m = MedusaHeads.init_random(1, 8, 16, base_hash="aaa")
    with pytest.raises(ValueError):
        m.check_base("bbb")
    e = ExitHeads.init_random((1,), 1, 8, 16, base_hash="aaa")
    with pytest.raises(ValueError):
        e.check_base("bbb")


def test_training_loops_reduce_loss_and_freeze_base(corpus_ids):
    base = ModelWeights.init_random(
        ModelConfig(n_layers=2, d_model=16, n_heads=2, max_positions=64, seed=8))
    before = {n: p.data.copy() for n, p in base.params.items()}
    hyper = HeadHyper(epochs=1, batch_size=4, seq_len=32, max_steps=20, lr=3e-3)
    m, ms = train_medusa(base, corpus_ids[:60000], 2, hyper)
    e, es = train_early_exit(base, corpus_ids[:60000], (1, 2), 2, hyper)
    assert ms["losses"][-1] < ms["losses"][0]
    assert es["losses"][-1] < es["losses"][0]
    for n, p in base.params.items():
        assert p.grad is None
        assert np.array_equal(p.data, before[n])
