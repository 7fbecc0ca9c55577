"""Two-branch sequence model with a compression bottleneck.

Each modality branch runs a small bidirectional transformer encoder,
then compresses its output to a fixed number of tokens with a bank of
learned queries attending across the encoded sequence, then projects
those tokens into the decoder's embedding space. The causal decoder
consumes [branch tokens..., text embeddings...] and predicts next
token ids over a shared vocabulary with a tied output head.

All parameters live in one flat, insertion-ordered dict keyed by
dotted names (``vision.enc.0.attn.q.weight`` and so on); the trainer
freezes and thaws by matching those names.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Dict, Optional

import numpy as np

from . import corpus
from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .lora import LoraAdapter, apply_delta

BRANCHES = ("vision", "audio")



@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by both branches and the decoder."""

    vocab_size: int = 512
    d_enc: int = 64
    d_llm: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_query: int = 8
    max_seq: int = 256
    seed: int = 0

    def validate(self) -> None:
        for field in ("vocab_size", "d_enc", "d_llm", "n_heads", "n_enc_layers",
                      "n_dec_layers", "n_query", "max_seq"):
            v = getattr(self, field)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"model.{field} must be a positive integer, got {v!r}")
        if self.d_enc % self.n_heads or self.d_llm % self.n_heads:
            raise ConfigError("feature sizes must be divisible by the head count")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"model.seed must be a non-negative integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class Branch:
    """One modality pipeline: encoder, query compressor, projection."""

    def __init__(self, model: "Model", name: str):
        self.model = model
        self.name = name

    def encode(self, ids) -> T.Tensor:
        """Run the bidirectional encoder over a token id sequence."""
        m = self.model
        idx = _check_ids(ids, m.config.max_seq)
        x = T.add(T.embed(m.param(f"{self.name}.enc.embed.tok"), idx),
                  T.embed(m.param(f"{self.name}.enc.embed.pos"), np.arange(idx.size)))
        for i in range(m.config.n_enc_layers):
            x = m.block(f"{self.name}.enc.{i}", x, causal=False)
        return m.ln(f"{self.name}.enc.final_ln", x)

    def qformer_compress(self, enc_out: T.Tensor) -> T.Tensor:
        """Compress (n, d_enc) features to exactly (n_query, d_llm).

        A bank of learned queries cross-attends over the encoder
        output, runs one feed-forward refinement, and is projected into
        the decoder embedding space.
        """
        m = self.model
        if enc_out.data.ndim != 2 or enc_out.shape[1] != m.config.d_enc:
            raise DimensionError(f"encoder output must be (n, {m.config.d_enc}), got {enc_out.shape}")
        p = f"{self.name}.qformer"
        query = m.param(f"{p}.query")
        qn = m.ln(f"{p}.ln1", query)
        q = m.linear(f"{p}.attn.q", qn)
        k = m.linear(f"{p}.attn.k", enc_out)
        v = m.linear(f"{p}.attn.v", enc_out)
        att = T.multihead_attention(q, k, v, m.config.n_heads)
        # The residual feeds the mean input row to every query rather
        # than the query bank itself. Queries are input-independent, so
        # a query residual would give all outputs a large shared
        # component and crowd out content; the mean row instead carries
        # the full token mix into each output unconditionally, with the
        # attention term refining it per query.
        x = T.add(m.linear(f"{p}.attn.o", att), T.mean_rows(enc_out))
        x = T.add(x, m.ffn(f"{p}.ffn", m.ln(f"{p}.ln2", x)))
        return m.linear(f"{self.name}.proj", x)

    def tokens(self, ids) -> T.Tensor:
        """Full branch pipeline: ids to compressed decoder-space tokens."""
        return self.qformer_compress(self.encode(ids))

    def segment_features(self, ids) -> T.Tensor:
        """Per-token decoder-space features, no query compression.

        The contrastive stage pools these into one segment embedding.
        Skipping the qformer keeps the pairing signal in the raw token
        mix; the projection is the only trained piece of that stage, so
        it is also the only map the pooled pair ever needs.
        """
        return self.model.linear(f"{self.name}.proj", self.encode(ids))


@dataclasses.dataclass
class Context:
    """An assembled decoder input plus segment bookkeeping.

    ``segments`` maps each context region to its row span as
    (kind, start, stop) with kind in {"visual", "audio", "text"}; the
    trainer uses it to keep the loss on text positions only.
    """

    embeddings: T.Tensor
    segments: tuple
    vision_tokens: Optional[T.Tensor]
    audio_tokens: Optional[T.Tensor]
    text_ids: Optional[np.ndarray]

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def text_span(self) -> tuple:
        for kind, start, stop in self.segments:
            if kind == "text":
                return (start, stop)
        raise ContractError("context has no text segment")


class Decoder:
    """Causal decoder over assembled branch tokens plus text embeddings."""

    def __init__(self, model: "Model"):
        self.model = model

    def assemble_context(self, vision_tokens: Optional[T.Tensor],
                         audio_tokens: Optional[T.Tensor], text_ids) -> Context:
        """Concatenate [visual | audio | text] into one decoder input."""
        m = self.model
        parts = []
        segments = []
        n = 0
        for kind, t in (("visual", vision_tokens), ("audio", audio_tokens)):
            if t is None:
                continue
            if t.data.ndim != 2 or t.shape[1] != m.config.d_llm:
                raise DimensionError(f"branch tokens must be (n, {m.config.d_llm}), got {t.shape}")
            parts.append(t)
            segments.append((kind, n, n + t.shape[0]))
            n += t.shape[0]
        idx = None
        if text_ids is not None and np.asarray(text_ids).size > 0:
            idx = _check_ids(text_ids, m.config.max_seq)
            parts.append(T.embed(m.param("llm.embed.tok"), idx))
            segments.append(("text", n, n + idx.size))
            n += idx.size
        if not parts:
            raise ContractError("context needs at least one segment")
        seq = parts[0] if len(parts) == 1 else T.concat_rows(parts)
        if n > m.config.max_seq:
            raise DimensionError(f"context length {n} exceeds max_seq {m.config.max_seq}")
        emb = T.add(seq, T.embed(m.param("llm.embed.pos"), np.arange(n)))
        return Context(emb, tuple(segments), vision_tokens, audio_tokens, idx)

    def decode(self, ctx) -> T.Tensor:
        """Map an assembled context to per-position vocabulary logits."""
        m = self.model
        x = ctx.embeddings if isinstance(ctx, Context) else ctx
        if x.data.ndim != 2 or x.shape[1] != m.config.d_llm:
            raise DimensionError(f"context must be (n, {m.config.d_llm}), got {x.shape}")
        for i in range(m.config.n_dec_layers):
            x = m.block(f"llm.{i}", x, causal=True)
        x = m.ln("llm.final_ln", x)
        return T.matmul(x, T.transpose(m.param("llm.embed.tok")))

    def generate_greedy(self, context: Context, max_new: int = 8,
                        eos_id: int = 0) -> np.ndarray:
        """Greedy decoding; stops at ``eos_id`` or after ``max_new`` tokens.

        Ties in the argmax go to the lowest token id.
        """
        if max_new < 1:
            raise ContractError("max_new must be at least 1")
        m = self.model
        prefix = sum(t.shape[0] for t in (context.vision_tokens, context.audio_tokens)
                     if t is not None)
        ids = [] if context.text_ids is None else [int(i) for i in context.text_ids]
        out = []
        ctx = context
        with T.no_grad():
            for _ in range(max_new):
                if prefix + len(ids) >= m.config.max_seq:
                    break
                logits = self.decode(ctx)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == eos_id:
                    break
                out.append(nxt)
                ids.append(nxt)
                ctx = self.assemble_context(context.vision_tokens, context.audio_tokens,
                                            np.asarray(ids, dtype=np.int64))
        return np.asarray(out, dtype=np.int64)


class Model:
    """Parameter store plus the two branches and the decoder."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: Dict[str, T.Parameter] = {}
        self.adapters: Dict[str, LoraAdapter] = {}
        self._init_params()
        self.vision = Branch(self, "vision")
        self.audio = Branch(self, "audio")
        self.decoder = Decoder(self)

    # -- construction -------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = T.Parameter(data, name=name, dtype=np.float32)

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)

        # Fan-in scaling keeps activations and, crucially, the tied
        # output head at unit-ish scale. The frozen decoder never
        # trains, so its initial dynamic range is all it ever has; a
        # flat tiny std caps logits near zero and no amount of prefix
        # or adapter training can make predictions confident.
        def w(*shape):
            return (rng.standard_normal(shape) / math.sqrt(shape[0])).astype(np.float32)

        def emb(*shape):
            return (rng.standard_normal(shape) / math.sqrt(shape[-1])).astype(np.float32)

        def linear(name, d_in, d_out):
            self._add(f"{name}.weight", w(d_in, d_out))
            self._add(f"{name}.bias", np.zeros(d_out, dtype=np.float32))

        def norm(name, d, gain=1.0):
            self._add(f"{name}.gain", np.full(d, gain, dtype=np.float32))
            self._add(f"{name}.bias", np.zeros(d, dtype=np.float32))

        def block(prefix, d, out_scale=1.0):
            norm(f"{prefix}.ln1", d)
            for part in ("q", "k", "v"):
                linear(f"{prefix}.attn.{part}", d, d)
            self._add(f"{prefix}.attn.o.weight", w(d, d) * out_scale)
            self._add(f"{prefix}.attn.o.bias", np.zeros(d, dtype=np.float32))
            norm(f"{prefix}.ln2", d)
            self._add(f"{prefix}.ffn.w1", w(d, 4 * d))
            self._add(f"{prefix}.ffn.b1", np.zeros(4 * d, dtype=np.float32))
            self._add(f"{prefix}.ffn.w2", w(4 * d, d) * out_scale)
            self._add(f"{prefix}.ffn.b2", np.zeros(d, dtype=np.float32))

        for branch in BRANCHES:
            # The branch encoders stay frozen for their whole life, so
            # their init IS their transform. Small residual branches and
            # damped positions keep each output row dominated by its own
            # token: a near-lossless code the later trained stages can
            # actually read, instead of two layers of fixed random
            # mixing that drown it. The 0.02 accounts for layer norm
            # blowing row norms up to sqrt(d) inside each block, and the
            # soft final gain keeps downstream attention logits out of
            # softmax saturation.
            self._add(f"{branch}.enc.embed.tok", emb(cfg.vocab_size, cfg.d_enc))
            self._add(f"{branch}.enc.embed.pos", emb(cfg.max_seq, cfg.d_enc) * 0.3)
            for i in range(cfg.n_enc_layers):
                block(f"{branch}.enc.{i}", cfg.d_enc, out_scale=0.02)
            norm(f"{branch}.enc.final_ln", cfg.d_enc, gain=0.25)
            # The qformer trains, so this is only a starting point, but
            # it starts with the attention and feed-forward terms well
            # below the mean-row residual: content first, refinement
            # learned on top.
            self._add(f"{branch}.qformer.query", emb(cfg.n_query, cfg.d_enc))
            norm(f"{branch}.qformer.ln1", cfg.d_enc)
            for part in ("q", "k", "v"):
                linear(f"{branch}.qformer.attn.{part}", cfg.d_enc, cfg.d_enc)
            self._add(f"{branch}.qformer.attn.o.weight", w(cfg.d_enc, cfg.d_enc) * 0.05)
            self._add(f"{branch}.qformer.attn.o.bias", np.zeros(cfg.d_enc, dtype=np.float32))
            norm(f"{branch}.qformer.ln2", cfg.d_enc)
            self._add(f"{branch}.qformer.ffn.w1", w(cfg.d_enc, 4 * cfg.d_enc))
            self._add(f"{branch}.qformer.ffn.b1", np.zeros(4 * cfg.d_enc, dtype=np.float32))
            self._add(f"{branch}.qformer.ffn.w2", w(4 * cfg.d_enc, cfg.d_enc) * 0.05)
            self._add(f"{branch}.qformer.ffn.b2", np.zeros(cfg.d_enc, dtype=np.float32))
            # Projections start small on purpose: they are the only
            # trainable map in the alignment stage, whose whole Adam
            # movement budget is on the order of 0.1 per weight, and a
            # full-size random start would eat most of it.
            self._add(f"{branch}.proj.weight", w(cfg.d_enc, cfg.d_llm) * 0.16)
            self._add(f"{branch}.proj.bias", np.zeros(cfg.d_llm, dtype=np.float32))

        # A narration token names the same thing as the content token it
        # paraphrases, so it starts from the same embedding vector (in
        # the audio branch's own table). The branches still see disjoint
        # id streams and separate projections; nothing is aligned across
        # branches until the contrastive stage trains those projections.
        toka = self.params["audio.enc.embed.tok"].data
        tokv = self.params["vision.enc.embed.tok"].data
        for content_id, narration_id in corpus.narration_pairs():
            if narration_id < cfg.vocab_size:
                toka[narration_id] = tokv[content_id]

        self._add("llm.embed.tok", emb(cfg.vocab_size, cfg.d_llm))
        self._add("llm.embed.pos", emb(cfg.max_seq, cfg.d_llm))
        for i in range(cfg.n_dec_layers):
            block(f"llm.{i}", cfg.d_llm)
        norm("llm.final_ln", cfg.d_llm)

    # -- shared forward pieces ----------------------------------------

    def param(self, name: str) -> T.Parameter:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"no parameter named {name!r}") from None

    def linear(self, name: str, x: T.Tensor) -> T.Tensor:
        y = T.affine(x, self.param(f"{name}.weight"), self.param(f"{name}.bias"))
        adapter = self.adapters.get(name)
        if adapter is not None:
            y = apply_delta(adapter, x, y)
        return y

    def ln(self, name: str, x: T.Tensor) -> T.Tensor:
        return T.layer_norm(x, self.param(f"{name}.gain"), self.param(f"{name}.bias"))

    def ffn(self, prefix: str, x: T.Tensor) -> T.Tensor:
        h = T.gelu(T.affine(x, self.param(f"{prefix}.w1"), self.param(f"{prefix}.b1")))
        return T.affine(h, self.param(f"{prefix}.w2"), self.param(f"{prefix}.b2"))

    def block(self, prefix: str, x: T.Tensor, causal: bool) -> T.Tensor:
        h = self.ln(f"{prefix}.ln1", x)
        q = self.linear(f"{prefix}.attn.q", h)
        k = self.linear(f"{prefix}.attn.k", h)
        v = self.linear(f"{prefix}.attn.v", h)
        att = T.multihead_attention(q, k, v, self.config.n_heads, causal=causal)
        x = T.add(x, self.linear(f"{prefix}.attn.o", att))
        return T.add(x, self.ffn(f"{prefix}.ffn", self.ln(f"{prefix}.ln2", x)))

    # -- public pipeline ----------------------------------------------

    def branch(self, name: str) -> Branch:
        if name not in BRANCHES:
            raise ContractError(f"unknown branch {name!r}; expected one of {BRANCHES}")
        return self.vision if name == "vision" else self.audio

    def encode(self, branch: str, ids) -> T.Tensor:
        return self.branch(branch).encode(ids)

    def qformer_compress(self, branch: str, enc_out: T.Tensor) -> T.Tensor:
        return self.branch(branch).qformer_compress(enc_out)

    def branch_tokens(self, name: str, ids) -> T.Tensor:
        return self.branch(name).tokens(ids)

    def branch_segment_features(self, name: str, ids) -> T.Tensor:
        return self.branch(name).segment_features(ids)

    def assemble_context(self, vision_tokens, audio_tokens, text_ids) -> Context:
        return self.decoder.assemble_context(vision_tokens, audio_tokens, text_ids)

    def decode(self, ctx) -> T.Tensor:
        return self.decoder.decode(ctx)

    def generate_greedy(self, context: Context, max_new: int = 8,
                        eos_id: int = 0) -> np.ndarray:
        return self.decoder.generate_greedy(context, max_new=max_new, eos_id=eos_id)

    # -- state --------------------------------------------------------

    def state(self) -> Dict[str, np.ndarray]:
        """Copy of every parameter, adapters included."""
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Replace parameter values; names and shapes must match exactly."""
        mine = set(self.params)
        theirs = set(state)
        if mine != theirs:
            missing = sorted(mine - theirs)[:3]
            extra = sorted(theirs - mine)[:3]
            raise ContractError(f"state mismatch; missing={missing} extra={extra}")
        for name, arr in state.items():
            p = self.params[name]
            if arr.shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = np.asarray(arr, dtype=np.float32).copy()

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def _check_ids(ids, max_seq: int) -> np.ndarray:
    idx = np.asarray(ids)
    if idx.ndim != 1 or idx.size == 0:
        raise DimensionError("token ids must be a non-empty 1-D sequence")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("token ids must be integers")
    if idx.size > max_seq:
        raise DimensionError(f"sequence length {idx.size} exceeds max_seq {max_seq}")
    return idx
