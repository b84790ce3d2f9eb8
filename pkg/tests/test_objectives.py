import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sentvec import autodiff as ad
from sentvec.autodiff import Tape, Tensor, grad_check
from sentvec.corpus import MASK, N_SPECIAL, build_corpus
from sentvec.model import BottleneckModel, ModelConfig
from sentvec.objectives import (
    AE,
    DAE,
    Batch,
    LossWeights,
    NoiseConfig,
    ObjectiveError,
    apply_noise,
    combine,
    combined_loss,
    interpolation_finetune_loss,
    loss_denoise,
    loss_mse_align,
    loss_translation,
    mse_between,
    sample_rng,
)
from sentvec.trainer import sample_batch

ZERO_NOISE = NoiseConfig(0.0, 0.0, 1)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(0, n_train=200, n_dev=20, n_test=20)


@pytest.fixture(scope="module")
def model(corpus):
    return BottleneckModel(ModelConfig(vocab_size=corpus.vocab.size))


@pytest.fixture(scope="module")
def batch(corpus):
    return sample_batch(corpus, 0, 3, 8)


def test_zero_noise_is_identity():
    rng = np.random.default_rng(0)
    toks = [1, 20, 21, 22, 2]
    assert apply_noise(toks, ZERO_NOISE, rng) == toks


def test_full_deletion_keeps_exactly_one_token():
    cfg = NoiseConfig(1.0, 0.0, 1)
    toks = [1, 20, 21, 22, 23, 2]
    for i in range(50):
        out = apply_noise(toks, cfg, sample_rng(0, 1, 0, i))
        assert out[0] == 1 and out[-1] == 2 and len(out) == 3
        assert out[1] in toks[1:-1]


def test_deletion_rate_binomial():
    cfg = NoiseConfig(0.1, 0.0, 1)
    n_trials, length = 10000, 10
    toks = list(range(20, 20 + length))
    deleted = 0
    for i in range(n_trials):
        deleted += length - len(apply_noise(toks, cfg, sample_rng(3, 1, 0, i)))
    # survival rule only triggers with probability 1e-10 per sentence here
    assert abs(deleted / (n_trials * length) - 0.1) < 0.01


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(N_SPECIAL, 200), min_size=1, max_size=14), st.integers(0, 2**31),
       st.floats(0, 1), st.floats(0, 1), st.integers(1, 5))
def test_noise_keeps_specials_and_content(content, seed, pd, pm, w):
    toks = [1, *content, 2]
    out = apply_noise(toks, NoiseConfig(pd, pm, w), np.random.default_rng(seed))
    assert out[0] == 1 and out[-1] == 2
    mid = out[1:-1]
    assert mid
    assert all(t == MASK or t in content for t in mid)
    assert all(t >= N_SPECIAL or t == MASK for t in mid)


def test_shuffle_moves_tokens_less_than_window():
    cfg = NoiseConfig(0.0, 0.0, 3)
    toks = list(range(20, 32))
    for i in range(200):
        out = apply_noise(toks, cfg, sample_rng(0, 1, 0, i))
        assert sorted(out) == toks
        for pos, t in enumerate(out):
            assert abs(pos - (t - 20)) < 3


def test_untrained_translation_loss_near_log_v(model, batch):
    v = model.config.vocab_size
    loss = float(loss_translation(model, batch).data)
    assert abs(loss - math.log(v)) / math.log(v) < 0.05


def test_duplicated_pair_same_loss(model, batch):
    one = Batch(batch.src[:1], batch.tgt[:1], batch.src_langs[:1], batch.tgt_langs[:1],
                batch.tgt_lang_tokens[:1], batch.row_ids[:1])
    k = 5
    dup = Batch(one.src * k, one.tgt * k, np.repeat(one.src_langs, k), np.repeat(one.tgt_langs, k),
                np.repeat(one.tgt_lang_tokens, k), np.repeat(one.row_ids, k))
    a = float(loss_translation(model, one).data)
    b = float(loss_translation(model, dup).data)
    assert abs(a - b) < 1e-6


def test_same_language_pair_rejected(model, batch):
    bad = Batch(batch.src, batch.src, batch.src_langs, batch.src_langs, batch.tgt_lang_tokens,
                batch.row_ids)
    with pytest.raises(ObjectiveError):
        loss_translation(model, bad)


def test_dae_with_zero_noise_equals_ae_bitwise(model, batch):
    a = loss_denoise(model, batch, ZERO_NOISE, DAE).data
    b = loss_denoise(model, batch, NoiseConfig(), AE).data
    assert a.tobytes() == b.tobytes()


def test_mse_examples():
    a = Tensor(np.array([[1.0, 0.0]], np.float32))
    b = Tensor(np.array([[0.0, 1.0]], np.float32))
    assert float(mse_between(a, b).data) == 1.0
    assert float(mse_between(b, a).data) == float(mse_between(a, b).data)
    with pytest.raises(ObjectiveError):
        mse_between(a, Tensor(np.zeros((1, 3))))


def test_mse_of_identical_sentences_is_zero(model, batch):
    same = Batch(batch.tgt, batch.tgt, batch.src_langs, batch.tgt_langs, batch.tgt_lang_tokens,
                 batch.row_ids)
    assert float(loss_mse_align(model, same).data) == 0.0


def test_mse_symmetric_in_pair_order(model, batch):
    swapped = Batch(batch.tgt, batch.src, batch.tgt_langs, batch.src_langs, batch.tgt_lang_tokens,
                    batch.row_ids)
    assert abs(float(loss_mse_align(model, batch).data) - float(loss_mse_align(model, swapped).data)) < 1e-9


def test_mse_gradient_flows_to_both_sides():
    a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    b = Tensor(np.array([[0.0, 1.0]]), requires_grad=True)
    with Tape() as tape:
        loss = mse_between(a, b)
    g = ad.backward(tape, loss, {"a": a, "b": b})
    assert np.allclose(g["a"], [[1.0, 1.0]]) and np.allclose(g["b"], [[-1.0, -1.0]])


def test_combine_arithmetic():
    parts = {k: Tensor(np.float32(v)) for k, v in (("mt", 2.0), ("mse", 0.5), ("ae", 3.0))}
    total = float(combine(parts, LossWeights(alpha=0.1, beta=0.01)).data)
    assert abs(total - 2.08) < 1e-6


def test_zero_weights_equal_translation_bitwise(model, batch):
    out = combined_loss(model, batch, LossWeights(0.0, 0.0), NoiseConfig())
    assert out.total.data.tobytes() == loss_translation(model, batch).data.tobytes()


def test_negative_weight_rejected():
    with pytest.raises(ObjectiveError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ObjectiveError):
        LossWeights(beta=float("nan"))


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2), st.floats(0, 2))
def test_components_sum_to_total(alpha, beta):
    out = combined_loss(_M, _B, LossWeights(alpha, beta), NoiseConfig(), report_all=True)
    c = out.components
    expect = c["mt"] + alpha * c["mse"] + beta * c["ae"]
    assert abs(expect - c["total"]) < 1e-5 * max(1.0, abs(expect))


def test_linear_in_weights(model, batch):
    def total(a, b):
        return float(combined_loss(model, batch, LossWeights(a, b), NoiseConfig()).total.data)

    w1, w2 = (0.1, 0.2), (0.5, 0.05)
    mid = tuple((x + y) / 2 for x, y in zip(w1, w2))
    assert abs((total(*w1) + total(*w2)) / 2 - total(*mid)) < 1e-5


def test_report_all_adds_no_tape_nodes(model, batch):
    w = LossWeights(0.0, 0.0)
    with Tape() as t1:
        combined_loss(model, batch, w, NoiseConfig())
    with Tape() as t2:
        combined_loss(model, batch, w, NoiseConfig(), report_all=True)
    assert len(t1) == len(t2)


def test_interpolation_endpoints(model, batch):
    model.freeze_encoder()
    try:
        n = len(batch)
        u0 = interpolation_finetune_loss(model, batch.src, batch.tgt, batch.tgt_lang_tokens, np.zeros(n))
        u1 = interpolation_finetune_loss(model, batch.src, batch.tgt, batch.tgt_lang_tokens, np.ones(n))
        ae = loss_denoise(model, batch, NoiseConfig(), AE)
        mt = loss_translation(model, batch)
        assert u0.data.tobytes() == ae.data.tobytes()
        assert u1.data.tobytes() == mt.data.tobytes()
    finally:
        model.freeze_encoder(False)


def test_interpolation_requires_frozen_encoder_and_leaves_it_untouched(model, batch):
    with pytest.raises(ObjectiveError):
        interpolation_finetune_loss(model, batch.src, batch.tgt, batch.tgt_lang_tokens, 0.5)
    model.freeze_encoder()
    try:
        with Tape() as tape:
            loss = interpolation_finetune_loss(model, batch.src, batch.tgt, batch.tgt_lang_tokens,
                                               np.full(len(batch), 0.3))
        grads = ad.backward(tape, loss, model.params)
        for name in model.encoder_params():
            assert not np.any(grads.get(name, 0.0))
    finally:
        model.freeze_encoder(False)


def test_denoise_loss_passes_finite_differences():
    cfg = ModelConfig(vocab_size=16, d_model=8, n_heads=2, ffn_dim=8, n_enc_layers=1, n_dec_layers=1,
                      max_len=8)
    m = BottleneckModel(cfg)
    rng = np.random.default_rng(1)
    for p in m.params.values():
        p.data = (p.data + 0.1 * rng.standard_normal(p.shape)).astype(np.float64)
    b = Batch([(9, 10)], [(11, 12, 13)], np.array([1]), np.array([0]), np.array([4]), np.array([0]))
    rep = grad_check(lambda p: loss_denoise(m, b, NoiseConfig(0.3, 0.3, 2), DAE), m.params,
                     step=1e-5, max_checks=4, floor=1e-6)
    assert rep.passed, rep


def test_all_losses_finite_on_random_params(corpus):
    for seed in range(3):
        m = BottleneckModel(ModelConfig(vocab_size=corpus.vocab.size, init_seed=seed))
        b = sample_batch(corpus, seed, 0, 16)
        out = combined_loss(m, b, LossWeights(1.0, 1.0), NoiseConfig(), report_all=True)
        assert all(np.isfinite(v) for v in out.components.values())


_C = build_corpus(0, n_train=200, n_dev=20, n_test=20)
_M = BottleneckModel(ModelConfig(vocab_size=_C.vocab.size))
_B = sample_batch(_C, 0, 3, 8)
