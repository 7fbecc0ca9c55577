"""Unit tests for the autodiff core.

Forward values are checked against hand-computed or loop-computed
oracles; gradients are checked against central differences in float64.
"""

import math

import numpy as np
import pytest

from avdoc import tensor as T
from avdoc.errors import (
    ContractError,
    DegenerateError,
    DimensionError,
    NumericsError,
)

TOL = 1e-4


def _p(rng, shape, name="p"):
    return T.Parameter(rng.standard_normal(shape), name=name, dtype=np.float64)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 5))
        want = np.zeros((4, 5))
        for i in range(4):
            for j in range(5):
                for k in range(3):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(T.Tensor(a, dtype=np.float64), T.Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(got.data, want, rtol=1e-12)


def test_matmul_identity_and_row_sum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4))
    eye = T.Tensor(np.eye(3), dtype=np.float64)
    np.testing.assert_array_equal(T.matmul(eye, T.Tensor(x, dtype=np.float64)).data, x)
    row = T.Tensor(np.array([[1.0, 2.0, 3.0]]), dtype=np.float64)
    ones = T.Tensor(np.ones((3, 1)), dtype=np.float64)
    np.testing.assert_array_equal(T.matmul(row, ones).data, [[6.0]])


def test_softmax_rows_uniform_on_equal_values():
    out = T.softmax_rows(T.Tensor(np.full((2, 5), 3.0), dtype=np.float64))
    np.testing.assert_allclose(out.data, np.full((2, 5), 0.2), atol=1e-12)


def test_softmax_rows_hand_value():
    x = T.Tensor(np.array([[0.0, math.log(3.0)]]), dtype=np.float64)
    out = T.softmax_rows(x)
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 6))
    a = T.softmax_rows(T.Tensor(x, dtype=np.float64)).data
    b = T.softmax_rows(T.Tensor(x + 1000.0, dtype=np.float64)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=1), np.ones(4), atol=1e-12)


def test_cross_entropy_hand_values():
    # Uniform two-way logits: loss is ln 2.
    x = T.Tensor(np.zeros((1, 2)), dtype=np.float64)
    loss = T.cross_entropy_mean(x, np.array([0]))
    np.testing.assert_allclose(loss.item(), math.log(2.0), atol=1e-12)
    # Probability of the target is 0.75: loss is ln(4/3).
    x = T.Tensor(np.array([[0.0, math.log(3.0)]]), dtype=np.float64)
    loss = T.cross_entropy_mean(x, np.array([1]))
    np.testing.assert_allclose(loss.item(), math.log(4.0 / 3.0), atol=1e-12)


def test_cross_entropy_saturated_and_hand_case():
    logits = np.zeros((1, 4))
    logits[0, 2] = 50.0
    loss = T.cross_entropy_mean(T.Tensor(logits, dtype=np.float64), np.array([2]))
    assert loss.item() < 1e-6
    # n=2, V=3, evaluated with scalar arithmetic.
    x = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 1.5]])
    want = 0.0
    for row, t in zip(x, (1, 2)):
        want += math.log(np.exp(row).sum()) - row[t]
    want /= 2.0
    got = T.cross_entropy_mean(T.Tensor(x, dtype=np.float64), np.array([1, 2]))
    np.testing.assert_allclose(got.item(), want, atol=1e-10)


def test_cross_entropy_ignore_index():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((4, 5))
    full = T.cross_entropy_mean(T.Tensor(logits[:2], dtype=np.float64), np.array([1, 3]))
    padded = T.cross_entropy_mean(
        T.Tensor(logits, dtype=np.float64), np.array([1, 3, T.IGNORE_INDEX, T.IGNORE_INDEX])
    )
    np.testing.assert_allclose(padded.item(), full.item(), atol=1e-12)
    with pytest.raises(DegenerateError):
        T.cross_entropy_mean(
            T.Tensor(logits, dtype=np.float64), np.full(4, T.IGNORE_INDEX, dtype=np.int64)
        )
    with pytest.raises(IndexError):
        T.cross_entropy_mean(T.Tensor(logits, dtype=np.float64), np.array([0, 1, 2, 5]))


def test_layer_norm_hand_value():
    x = T.Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]), dtype=np.float64)
    gain = T.Tensor(np.ones(4), dtype=np.float64)
    bias = T.Tensor(np.zeros(4), dtype=np.float64)
    out = T.layer_norm(x, gain, bias)
    inv = 1.0 / math.sqrt(1.25 + 1e-5)
    want = np.array([[-1.5, -0.5, 0.5, 1.5]]) * inv
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_cosine_hand_values():
    a = T.Tensor(np.array([1.0, 0.0]), dtype=np.float64)
    b = T.Tensor(np.array([0.0, 1.0]), dtype=np.float64)
    np.testing.assert_allclose(T.cosine(a, b).item(), 0.0, atol=1e-12)
    c = T.Tensor(np.array([1.0, 2.0]), dtype=np.float64)
    d = T.Tensor(np.array([2.0, 4.0]), dtype=np.float64)
    np.testing.assert_allclose(T.cosine(c, d).item(), 1.0, atol=1e-12)
    with pytest.raises(DegenerateError):
        T.cosine(a, T.Tensor(np.zeros(2), dtype=np.float64))


def test_cosine_self_scale_and_zero_grad():
    rng = np.random.default_rng(9)
    u = rng.standard_normal(5)
    v = rng.standard_normal(5)
    ut = T.Tensor(u, dtype=np.float64)
    np.testing.assert_allclose(T.cosine(ut, ut).item(), 1.0, atol=1e-12)
    plain = T.cosine(ut, T.Tensor(v, dtype=np.float64)).item()
    scaled = T.cosine(T.Tensor(3.5 * u, dtype=np.float64), T.Tensor(v, dtype=np.float64)).item()
    np.testing.assert_allclose(plain, scaled, atol=1e-9)
    # cosine(u, u) is constant 1, so its gradient vanishes.
    p = T.Parameter(u, name="u", dtype=np.float64)
    T.cosine(p, p).backward()
    np.testing.assert_allclose(p.grad, np.zeros(5), atol=1e-9)


def test_layer_norm_constant_row_is_bias():
    x = T.Tensor(np.full((2, 4), 7.0), dtype=np.float64)
    gain = T.Tensor(np.ones(4), dtype=np.float64)
    bias = T.Tensor(np.zeros(4), dtype=np.float64)
    out = T.layer_norm(x, gain, bias)
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_finite_diff_on_quadratic_is_tight():
    p = T.Parameter(np.random.default_rng(2).standard_normal(6), name="x", dtype=np.float64)

    def f():
        return T.sum_all(T.mul(p, p))

    assert T.finite_diff_check(f, p) < 1e-9


def test_causal_attention_masks_exactly():
    rng = np.random.default_rng(11)
    x = T.Tensor(rng.standard_normal((5, 8)), dtype=np.float64)
    out_full = T.multihead_attention(x, x, x, n_heads=2, causal=True)
    # Row 0 may only see key 0, so it must equal that value row exactly.
    np.testing.assert_array_equal(out_full.data[0], x.data[0])
    # Changing future keys must not change earlier outputs at all.
    y = x.data.copy()
    y[4] += 100.0
    out_bumped = T.multihead_attention(
        T.Tensor(y, dtype=np.float64), T.Tensor(y, dtype=np.float64), T.Tensor(y, dtype=np.float64),
        n_heads=2, causal=True,
    )
    np.testing.assert_array_equal(out_full.data[:4], out_bumped.data[:4])


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(13)
    k = np.tile(rng.standard_normal(8), (6, 1))
    v = rng.standard_normal((6, 8))
    q = rng.standard_normal((3, 8))
    out = T.multihead_attention(
        T.Tensor(q, dtype=np.float64), T.Tensor(k, dtype=np.float64), T.Tensor(v, dtype=np.float64),
        n_heads=4,
    )
    want = np.tile(v.mean(axis=0), (3, 1))
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_embed_accumulates_repeated_ids():
    table = T.Parameter(np.zeros((4, 3)), name="tab", dtype=np.float64)
    ids = np.array([2, 2, 1])
    out = T.embed(table, ids)
    loss = T.sum_all(out)
    loss.backward()
    want = np.zeros((4, 3))
    want[2] = 2.0
    want[1] = 1.0
    np.testing.assert_array_equal(table.grad, want)
    with pytest.raises(IndexError):
        T.embed(table, np.array([4]))


def test_grad_accumulates_across_reuse():
    p = T.Parameter(np.array([2.0, 3.0]), name="p", dtype=np.float64)
    out = T.sum_all(T.add(p, p))
    out.backward()
    np.testing.assert_array_equal(p.grad, [2.0, 2.0])


def test_frozen_param_gets_no_grad():
    p = T.Parameter(np.ones((2, 2)), name="p", dtype=np.float64)
    q = T.Parameter(np.ones((2, 2)), name="q", dtype=np.float64)
    q.requires_grad = False
    out = T.sum_all(T.matmul(p, q))
    out.backward()
    assert p.grad is not None
    assert q.grad is None


def test_no_grad_builds_no_graph():
    p = T.Parameter(np.ones(3), name="p", dtype=np.float64)
    with T.no_grad():
        out = T.sum_all(T.scale(p, 2.0))
    assert not out.requires_grad
    with pytest.raises(ContractError):
        out.backward()


def test_backward_contract_violations():
    p = T.Parameter(np.ones((2, 2)), name="p", dtype=np.float64)
    y = T.scale(p, 2.0)
    with pytest.raises(ContractError):
        y.backward()  # not a scalar
    loss = T.sum_all(y)
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()  # graph was freed


def test_shape_and_dtype_errors():
    a = T.Tensor(np.ones((2, 3)), dtype=np.float64)
    b = T.Tensor(np.ones((2, 2)), dtype=np.float64)
    with pytest.raises(DimensionError):
        T.matmul(a, b)
    with pytest.raises(DimensionError):
        T.add(a, b)
    with pytest.raises(ContractError):
        T.add(a, T.Tensor(np.ones((2, 3)), dtype=np.float32))
    with pytest.raises(NumericsError):
        T.log(T.Tensor(np.array([1.0, -1.0]), dtype=np.float64))
    with pytest.raises(DegenerateError):
        T.l2_normalize_rows(T.Tensor(np.zeros((2, 3)), dtype=np.float64))
    with pytest.raises(DimensionError):
        T.Tensor(np.ones((2, 2, 2)))


def test_nonfinite_forward_raises():
    big = T.Tensor(np.array([800.0]), dtype=np.float64)
    with pytest.raises(NumericsError):
        T.exp(big)


def _gradcheck_cases(rng):
    """Small scalar-valued graphs exercising every differentiable op."""
    a = _p(rng, (3, 4), "a")
    b = _p(rng, (4, 2), "b")
    v = _p(rng, (4,), "v")
    w = _p(rng, (4,), "w")
    sq = _p(rng, (3, 3), "sq")
    tab = _p(rng, (5, 3), "tab")
    ids = rng.integers(0, 5, size=6)
    pos = T.Parameter(rng.random((3, 4)) + 0.5, name="pos", dtype=np.float64)
    tgt = rng.integers(0, 2, size=3)
    tgt_ign = tgt.copy()
    tgt_ign[0] = T.IGNORE_INDEX
    q = _p(rng, (4, 6), "q")
    k = _p(rng, (5, 6), "k")
    val = _p(rng, (5, 6), "val")

    return [
        (lambda: T.sum_all(T.matmul(a, b)), [a, b]),
        (lambda: T.sum_all(T.mul(T.transpose(a), T.transpose(a))), [a]),
        (lambda: T.sum_all(T.add(a, T.neg(a))), [a]),
        (lambda: T.sum_all(T.add(a, v)), [a, v]),
        (lambda: T.sum_all(T.sub(v, w)), [v, w]),
        (lambda: T.sum_all(T.gelu(a)), [a]),
        (lambda: T.sum_all(T.exp(T.scale(a, 0.3))), [a]),
        (lambda: T.sum_all(T.log(pos)), [pos]),
        (lambda: T.sum_all(T.clamp_min(a, 0.1)), [a]),
        (lambda: T.sum_all(T.mul(T.softmax_rows(a), a)), [a]),
        (lambda: T.sum_all(T.layer_norm(a, v, w)), [a, v, w]),
        (lambda: T.sum_all(T.embed(tab, ids)), [tab]),
        (lambda: T.sum_all(T.concat_rows([v, w])), [v, w]),
        (lambda: T.sum_all(T.concat_rows([a, a])), [a]),
        (lambda: T.sum_all(T.mul(T.mean_rows(a), v)), [a, v]),
        (lambda: T.sum_all(T.exp(T.row_sums(T.scale(sq, 0.2)))), [sq]),
        (lambda: T.sum_all(T.diag_part(sq)), [sq]),
        (lambda: T.sum_all(T.l2_normalize_rows(a)), [a]),
        (lambda: T.cosine(v, w), [v, w]),
        (lambda: T.cross_entropy_mean(T.matmul(a, b), tgt), [a, b]),
        (lambda: T.cross_entropy_mean(T.matmul(a, b), tgt_ign), [a, b]),
        (lambda: T.sum_all(T.multihead_attention(q, k, val, n_heads=2)), [q, k, val]),
        (lambda: T.sum_all(T.multihead_attention(q, q, q, n_heads=3, causal=True)), [q]),
    ]


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    for fn, params in _gradcheck_cases(rng):
        rel = T.finite_diff_check(fn, params)
        assert rel < TOL, f"relative error {rel:.2e} for {params[0].name}"


@pytest.mark.parametrize("seed", range(20))
def test_composite_graph_gradcheck(seed):
    """A deeper composite touching reuse, norms, attention, and loss."""
    rng = np.random.default_rng(500 + seed)
    x = _p(rng, (4, 6), "x")
    wq = _p(rng, (6, 6), "wq")
    gain = T.Parameter(np.ones(6), name="gain", dtype=np.float64)
    bias = T.Parameter(np.zeros(6), name="bias", dtype=np.float64)
    head = _p(rng, (6, 3), "head")
    tgt = rng.integers(0, 3, size=4)

    def f():
        h = T.layer_norm(x, gain, bias)
        qp = T.matmul(h, wq)
        att = T.multihead_attention(qp, h, h, n_heads=2, causal=True)
        mixed = T.add(att, T.gelu(qp))
        return T.cross_entropy_mean(T.matmul(mixed, head), tgt)

    rel = T.finite_diff_check(f, [x, wq, gain, bias, head])
    assert rel < TOL
