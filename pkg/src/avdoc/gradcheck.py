"""Numerical gradient audit over every differentiable operation.

Each case builds a scalar loss from freshly seeded float64 inputs and
compares the reverse-mode gradient against central finite differences.
Inputs are drawn at unit-ish scale so gradients stay well above the
float64 noise floor; tiny default-init weights would otherwise drown
the comparison in rounding error.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import alignment, corpus, lora, trainer
from . import tensor as T
from .model import Model, ModelConfig

TOLERANCE = 1e-4


def _param(rng, shape, name, lo=-1.0, hi=1.0) -> T.Parameter:
    return T.Parameter(rng.uniform(lo, hi, size=shape), name)


def _weighted_sum(x: T.Tensor) -> T.Tensor:
    # Weight drawn from the shape alone so repeated evaluations of one
    # case see the identical function, as finite differencing requires.
    w = T.Tensor(np.random.default_rng([97, *x.shape]).uniform(-1.0, 1.0, size=x.shape))
    return T.sum_all(T.mul(x, w))


Case = Callable[[np.random.Generator], Tuple[Callable[[], T.Tensor], Sequence[T.Parameter]]]


def _case_matmul(rng):
    a = _param(rng, (3, 4), "a")
    b = _param(rng, (4, 2), "b")
    return (lambda: _weighted_sum(T.matmul(a, b))), [a, b]


def _case_add_bias(rng):
    x = _param(rng, (3, 4), "x")
    b = _param(rng, (4,), "b")
    return (lambda: _weighted_sum(T.add(x, b))), [x, b]


def _case_affine(rng):
    x = _param(rng, (3, 4), "x")
    w = _param(rng, (4, 2), "w")
    b = _param(rng, (2,), "b")
    return (lambda: _weighted_sum(T.affine(x, w, b))), [x, w, b]


def _case_sub_neg(rng):
    x = _param(rng, (2, 3), "x")
    y = _param(rng, (2, 3), "y")
    return (lambda: _weighted_sum(T.sub(x, T.neg(y)))), [x, y]


def _case_mul_scale(rng):
    x = _param(rng, (2, 4), "x")
    y = _param(rng, (2, 4), "y")
    return (lambda: _weighted_sum(T.scale(T.mul(x, y), 1.7))), [x, y]


def _case_exp(rng):
    x = _param(rng, (2, 3), "x")
    return (lambda: _weighted_sum(T.exp(x))), [x]


def _case_log(rng):
    x = _param(rng, (2, 3), "x", lo=0.5, hi=2.0)
    return (lambda: _weighted_sum(T.log(x))), [x]


def _case_clamp_min(rng):
    x = _param(rng, (6,), "x", lo=0.5, hi=2.0)
    return (lambda: _weighted_sum(T.clamp_min(x, 0.1))), [x]


def _case_gelu(rng):
    x = _param(rng, (3, 3), "x")
    return (lambda: _weighted_sum(T.gelu(x))), [x]


def _case_softmax(rng):
    x = _param(rng, (3, 4), "x")
    return (lambda: _weighted_sum(T.softmax_rows(x))), [x]


def _case_layer_norm(rng):
    x = _param(rng, (3, 5), "x")
    g = _param(rng, (5,), "g", lo=0.8, hi=1.2)
    b = _param(rng, (5,), "b", lo=-0.2, hi=0.2)
    return (lambda: _weighted_sum(T.layer_norm(x, g, b))), [x, g, b]


def _case_embed(rng):
    table = _param(rng, (7, 4), "table")
    ids = rng.integers(0, 7, size=5)
    return (lambda: _weighted_sum(T.embed(table, ids))), [table]


def _case_concat_rows(rng):
    x = _param(rng, (2, 3), "x")
    y = _param(rng, (4, 3), "y")
    return (lambda: _weighted_sum(T.concat_rows([x, y]))), [x, y]


def _case_mean_rows(rng):
    x = _param(rng, (4, 3), "x")
    return (lambda: _weighted_sum(T.mean_rows(x))), [x]


def _case_row_sums(rng):
    x = _param(rng, (4, 3), "x")
    return (lambda: _weighted_sum(T.row_sums(x))), [x]


def _case_diag_part(rng):
    x = _param(rng, (4, 4), "x")
    return (lambda: _weighted_sum(T.diag_part(x))), [x]


def _case_unit(rng):
    x = _param(rng, (5,), "x", lo=0.5, hi=1.5)
    return (lambda: _weighted_sum(T.unit(x))), [x]


def _case_l2_normalize(rng):
    x = _param(rng, (3, 4), "x", lo=0.3, hi=1.5)
    return (lambda: _weighted_sum(T.l2_normalize_rows(x))), [x]


def _case_cosine(rng):
    u = _param(rng, (5,), "u", lo=0.2, hi=1.0)
    v = _param(rng, (5,), "v", lo=-1.0, hi=-0.2)
    return (lambda: T.sum_all(T.cosine(u, v))), [u, v]


def _case_cross_entropy(rng):
    logits = _param(rng, (4, 6), "logits")
    labels = np.array([1, 5, T.IGNORE_INDEX, 2])
    return (lambda: T.cross_entropy_mean(logits, labels)), [logits]


def _case_attention(rng):
    q = _param(rng, (3, 4), "q")
    k = _param(rng, (3, 4), "k")
    v = _param(rng, (3, 4), "v")
    return (lambda: _weighted_sum(
        T.multihead_attention(q, k, v, n_heads=2, causal=True))), [q, k, v]


def _case_cross_attention(rng):
    q = _param(rng, (2, 4), "q")
    k = _param(rng, (5, 4), "k")
    v = _param(rng, (5, 4), "v")
    return (lambda: _weighted_sum(
        T.multihead_attention(q, k, v, n_heads=2, causal=False))), [q, k, v]


def _case_lora_path(rng):
    x = _param(rng, (3, 4), "x")
    a = _param(rng, (2, 4), "A")
    b = _param(rng, (4, 2), "B")
    base = T.Tensor(rng.uniform(-1, 1, size=(3, 4)))
    return (lambda: _weighted_sum(
        T.add(base, T.matmul(T.matmul(x, T.transpose(a)), T.transpose(b))))), [x, a, b]


def _case_contrastive(rng):
    a = _param(rng, (4, 6), "a")
    v = _param(rng, (4, 6), "v")

    def f():
        batch = alignment.AlignmentBatch(a, v, tuple(range(4)))
        return alignment.contrastive_loss(batch, tau=0.5, direction="symmetric")
    return f, [a, v]


def _case_contrastive_strict(rng):
    a = _param(rng, (3, 6), "a", lo=0.5, hi=1.5)
    v = _param(rng, (3, 6), "v", lo=0.5, hi=1.5)

    def f():
        batch = alignment.AlignmentBatch(a, v, tuple(range(3)))
        return alignment.contrastive_loss(batch, strict_paper_f=True)
    return f, [a, v]


def _case_block_composite(rng):
    """Pre-norm attention + feed-forward residual stack in miniature."""
    x = _param(rng, (4, 6), "x")
    g1 = _param(rng, (6,), "g1", lo=0.8, hi=1.2)
    b1 = _param(rng, (6,), "b1", lo=-0.2, hi=0.2)
    w1 = _param(rng, (6, 6), "w1", lo=-0.5, hi=0.5)
    w2 = _param(rng, (6, 6), "w2", lo=-0.5, hi=0.5)

    def f():
        h = T.layer_norm(x, g1, b1)
        h = T.multihead_attention(h, h, h, n_heads=2, causal=True)
        h = T.add(x, h)
        return _weighted_sum(T.add(h, T.gelu(T.matmul(T.matmul(h, w1), w2))))
    return f, [x, g1, b1, w1, w2]


_MODEL_PICKS = (
    "vision.qformer.attn.k.weight", "audio.proj.weight", "llm.0.attn.v.weight",
    "vision.qformer.query", "llm.final_ln.gain", "vision.enc.0.ffn.w2",
    "llm.embed.tok", "audio.qformer.ln2.gain",
)


def _micro_model(seed: int) -> Model:
    """Tiny model with parameters re-randomized to unit-ish scale."""
    cfg = ModelConfig(vocab_size=64, d_enc=8, d_llm=8, n_heads=2,
                      n_enc_layers=1, n_dec_layers=1, n_query=2,
                      max_seq=64, seed=0)
    model = Model(cfg)
    rng = np.random.default_rng([seed, 5])
    for name, p in model.params.items():
        noise = rng.standard_normal(p.data.shape)
        if name.endswith(("ln1.gain", "ln2.gain", "final_ln.gain")):
            p.data = 1.0 + 0.2 * noise
        else:
            p.data = 0.3 * noise
    return model


def _picks(model: Model, seed: int) -> List[T.Parameter]:
    names = [_MODEL_PICKS[(seed + i) % len(_MODEL_PICKS)] for i in range(2)]
    return [model.params[n] for n in names]


def _stage1_lm_case(seed: int):
    """Single-branch instruction loss, the stage-1 objective."""
    model = _micro_model(seed)
    rng = np.random.default_rng([seed, 6])
    item = trainer.LMItem([rng.integers(0, 64, size=5)], [],
                          rng.integers(0, 64, size=1),
                          rng.integers(0, 64, size=3))
    return (lambda: trainer.lm_loss(model, item)), _picks(model, seed)


def _stage2_contrastive_case(seed: int):
    """Pooled branch embeddings through the in-batch contrastive loss."""
    model = _micro_model(seed)
    rng = np.random.default_rng([seed, 7])
    pairs = [(rng.integers(0, 64, size=4), rng.integers(0, 64, size=5))
             for _ in range(3)]

    def f():
        vision = [alignment.pool(model.branch_tokens("vision", v)) for v, _ in pairs]
        audio = [alignment.pool(model.branch_tokens("audio", a)) for _, a in pairs]
        ab = alignment.AlignmentBatch.from_pooled(audio, vision,
                                                  [("sv", i) for i in range(3)])
        return alignment.contrastive_loss(ab, tau=0.07)

    return f, _picks(model, seed)


_S3_PICKS = (
    "vision.qformer.attn.k.weight", "audio.proj.weight", "llm.0.attn.o.weight",
    "vision.qformer.query", "llm.final_ln.gain", "vision.enc.0.ffn.w2",
    "llm.embed.tok", "audio.qformer.ln2.gain",
)


def _stage3_fusion_case(seed: int):
    """Both branches plus prompt through the decoder with live adapters.

    Picks come from _S3_PICKS: attaching adapters freezes the adapted
    base weights, whose zero analytic gradient is correct but
    uncheckable against finite differences.
    """
    model = _micro_model(seed)
    lora.attach_targets(model, 2, 4.0, lora.default_targets(1))
    rng = np.random.default_rng([seed, 8])
    for ad in model.adapters.values():
        ad.A.data = 0.3 * rng.standard_normal(ad.A.data.shape)
        ad.B.data = 0.3 * rng.standard_normal(ad.B.data.shape)

    vis = rng.integers(0, 64, size=5)
    aud = rng.integers(0, 64, size=6)
    text = rng.integers(0, 64, size=4)
    labels = np.full(2 * model.config.n_query + len(text), T.IGNORE_INDEX)
    labels[-3:] = rng.integers(0, 64, size=3)

    def f():
        v = model.branch_tokens("vision", vis)
        a = model.branch_tokens("audio", aud)
        ctx = model.assemble_context(v, a, text)
        return T.cross_entropy_mean(model.decode(ctx), labels)

    adapters = sorted(model.adapters)
    picked = [model.params[_S3_PICKS[(seed + i) % len(_S3_PICKS)]] for i in range(2)]
    picked += [model.adapters[adapters[seed % len(adapters)]].A,
               model.adapters[adapters[(seed + 1) % len(adapters)]].B]
    return f, picked


OP_CASES: Dict[str, Case] = {
    "matmul": _case_matmul,
    "add_bias": _case_add_bias,
    "affine": _case_affine,
    "sub_neg": _case_sub_neg,
    "mul_scale": _case_mul_scale,
    "exp": _case_exp,
    "log": _case_log,
    "clamp_min": _case_clamp_min,
    "gelu": _case_gelu,
    "softmax_rows": _case_softmax,
    "layer_norm": _case_layer_norm,
    "embed": _case_embed,
    "concat_rows": _case_concat_rows,
    "mean_rows": _case_mean_rows,
    "row_sums": _case_row_sums,
    "diag_part": _case_diag_part,
    "unit": _case_unit,
    "l2_normalize_rows": _case_l2_normalize,
    "cosine": _case_cosine,
    "cross_entropy_mean": _case_cross_entropy,
    "attention_causal": _case_attention,
    "attention_cross": _case_cross_attention,
    "lora_delta": _case_lora_path,
    "contrastive": _case_contrastive,
    "contrastive_strict": _case_contrastive_strict,
    "block_composite": _case_block_composite,
}

N_MODEL_SEEDS = 3


def run_suite(base_seed: int = 0, n_seeds: int = 20) -> List[Tuple[str, float]]:
    """Max relative error per operation across seeds, sorted by name."""
    worst: Dict[str, float] = {}
    for offset in range(n_seeds):
        seed = base_seed + offset
        for name, build in OP_CASES.items():
            rng = np.random.default_rng([seed, 13, len(name)])
            f, params = build(rng)
            rel = T.finite_diff_check(f, params)
            worst[name] = max(worst.get(name, 0.0), rel)
    stage_cases = (("stage1_lm_loss", _stage1_lm_case),
                   ("stage2_contrastive_loss", _stage2_contrastive_case),
                   ("stage3_fusion_loss", _stage3_fusion_case))
    for offset in range(min(N_MODEL_SEEDS, n_seeds)):
        for name, build in stage_cases:
            f, params = build(base_seed + offset)
            rel = T.finite_diff_check(f, params)
            worst[name] = max(worst.get(name, 0.0), rel)
    return sorted(worst.items())
