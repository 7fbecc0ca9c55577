"""Adapter attachment, identity-at-init, freezing, and merge equivalence."""

import numpy as np
import pytest

from avdoc import lora
from avdoc import tensor as T
from avdoc.errors import ConfigError, ContractError
from avdoc.model import Model, ModelConfig

CFG = ModelConfig(vocab_size=16, d_enc=8, d_llm=8, n_heads=2, n_enc_layers=1,
                  n_dec_layers=2, n_query=2, max_seq=16, seed=3)


def _sample_logits(m, seed):
    rng = np.random.default_rng(seed)
    tok = m.branch_tokens("vision", rng.integers(0, 16, size=4))
    ctx = m.assemble_context(tok, None, rng.integers(0, 16, size=3))
    return m.decode(ctx).data


def _adapter(d_in, d_out, rank, alpha, seed=0):
    return lora.LoraAdapter("t", d_in, d_out, rank, alpha, np.random.default_rng(seed))


def test_default_targets_are_decoder_q_and_v():
    assert lora.default_targets(2) == [
        "llm.0.attn.q", "llm.0.attn.v", "llm.1.attn.q", "llm.1.attn.v",
    ]


def test_attach_registers_freezes_and_counts():
    m = Model(CFG)
    lora.attach_targets(m, rank=4, alpha=8)
    assert set(m.adapters) == set(lora.default_targets(2))
    assert len(m.adapters) == 4
    new_params = [n for n in m.params if ".lora." in n]
    assert len(new_params) == 8
    ad = m.adapters["llm.0.attn.q"]
    assert ad.A.shape == (4, 8)
    assert ad.B.shape == (8, 4)
    assert ad.scaling == 2.0
    assert np.array_equal(ad.B.data, np.zeros((8, 4)))
    # Base weights flip to frozen while the adapter is attached.
    assert not m.param("llm.0.attn.q.weight").trainable
    assert m.param("llm.0.attn.k.weight").trainable
    with pytest.raises(ContractError):
        lora.attach_targets(m, rank=4, alpha=8)
    m2 = Model(CFG)
    with pytest.raises(ContractError):
        lora.attach_targets(m2, rank=4, alpha=8, targets=["llm.9.attn.q"])
    with pytest.raises(ConfigError):
        lora.attach_targets(m2, rank=0, alpha=8)


def test_detach_restores_flags_and_params():
    m = Model(CFG)
    names_before = set(m.params)
    lora.attach_targets(m, rank=4, alpha=8)
    lora.detach_targets(m)
    assert set(m.params) == names_before
    assert m.adapters == {}
    assert m.param("llm.0.attn.q.weight").trainable


def test_fresh_adapter_is_identity():
    plain = Model(CFG)
    before = _sample_logits(plain, 0)
    adapted = Model(CFG)
    lora.attach_targets(adapted, rank=4, alpha=8)
    after = _sample_logits(adapted, 0)
    assert np.array_equal(before, after)


def test_lora_apply_hand_cases():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((5, 3)).astype(np.float32)
    x = rng.standard_normal(3).astype(np.float32)
    ad = _adapter(3, 5, rank=1, alpha=1)
    # B = 0: adapted output equals the plain product exactly.
    got = lora.lora_apply(T.Tensor(w), ad, T.Tensor(x))
    np.testing.assert_array_equal(got.data, w @ x)
    # A picks coordinate 0, B routes it to output 0, alpha = r = 1.
    ad.A.data = np.array([[1.0, 0.0, 0.0]], dtype=np.float32)
    ad.B.data = np.array([[1.0], [0.0], [0.0], [0.0], [0.0]], dtype=np.float32)
    got = lora.lora_apply(T.Tensor(w), ad, T.Tensor(x))
    want = w @ x
    want[0] += x[0]
    np.testing.assert_allclose(got.data, want, rtol=1e-6)
    # Batched rows give one output row per input row.
    xs = rng.standard_normal((4, 3)).astype(np.float32)
    got = lora.lora_apply(T.Tensor(w), ad, T.Tensor(xs))
    assert got.shape == (4, 5)


def test_gradient_reaches_adapter_not_frozen_base():
    w = T.Parameter(np.random.default_rng(5).standard_normal((4, 4)), name="w",
                    dtype=np.float64)
    w.trainable = False
    ad = _adapter(4, 4, rank=2, alpha=2)
    ad.A.data = ad.A.data.astype(np.float64)
    ad.B.data = np.random.default_rng(6).standard_normal(ad.B.shape)
    x = T.Tensor(np.random.default_rng(7).standard_normal(4), dtype=np.float64)

    def f():
        return T.sum_all(lora.lora_apply(w, ad, x))

    rel = T.finite_diff_check(f, [ad.A, ad.B])
    assert rel < 1e-4
    f().backward()
    assert w.grad is None
    assert ad.A.grad is not None and ad.B.grad is not None


def test_merge_formula_and_inverse():
    ad = _adapter(8, 8, rank=2, alpha=4, seed=1)
    rng = np.random.default_rng(2)
    ad.A.data = rng.standard_normal(ad.A.shape).astype(np.float32)
    w = rng.standard_normal((8, 8)).astype(np.float32)
    # B = 0 merges to W bitwise.
    np.testing.assert_array_equal(lora.lora_merge(w, ad), w)
    ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
    merged = lora.lora_merge(w, ad)
    np.testing.assert_allclose(merged, w + 2.0 * (ad.B.data @ ad.A.data), atol=1e-6)
    recovered = merged - ad.scaling * (ad.B.data @ ad.A.data)
    np.testing.assert_allclose(recovered, w, atol=1e-6)


def test_merged_weight_agrees_with_apply_on_100_inputs():
    ad = _adapter(8, 6, rank=3, alpha=6, seed=8)
    rng = np.random.default_rng(9)
    ad.A.data = rng.standard_normal(ad.A.shape).astype(np.float32)
    ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
    w = rng.standard_normal((6, 8)).astype(np.float32)
    merged = lora.lora_merge(w, ad)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(8).astype(np.float32)
        with T.no_grad():
            y = lora.lora_apply(T.Tensor(w), ad, T.Tensor(x)).data
        worst = max(worst, float(np.max(np.abs(merged @ x - y))))
    assert worst < 1e-5


def test_merged_model_matches_adapted_model():
    adapted = Model(CFG)
    lora.attach_targets(adapted, rank=4, alpha=8)
    rng = np.random.default_rng(2)
    for ad in adapted.adapters.values():
        ad.A.data = (rng.standard_normal(ad.A.shape) * 0.3).astype(np.float32)
        ad.B.data = (rng.standard_normal(ad.B.shape) * 0.3).astype(np.float32)
    plain = Model(CFG)
    plain.load_state(lora.merged_state(adapted))
    for trial in range(5):
        a = _sample_logits(adapted, 10 + trial)
        b = _sample_logits(plain, 10 + trial)
        assert np.max(np.abs(a - b)) < 1e-5
