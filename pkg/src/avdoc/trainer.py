"""Staged training protocol with explicit freeze control.

Four stages run in a fixed order, each declaring glob patterns over
parameter names that partition the model into trainable and frozen
sets. Stage 1 tunes each branch's compressor and projection on
single-modality tasks (restoring slide reading order, transcribing
narration) with everything else held fixed. Stage 2 aligns the two
branches contrastively, training only the projections. Stage 3 tunes
fusion QA through low-rank adapters on the decoder's attention plus
the projections; the decoder base never changes.

Frozen parameters are hash-verified before and after every stage.
All randomness flows from one root seed, so a repeated run produces
byte-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import fnmatch
import hashlib
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import alignment, contexts, corpus, lora
from . import tensor as T
from .checkpoint import CheckpointData
from .errors import ConfigError, ContractError, TrainingDivergedError
from .model import Model

STAGE_ORDER = ("S1_VISION", "S1_AUDIO", "S2_ALIGN", "S3_FUSION")
ABLATABLE = ("S1", "S2", "S3")

DEFAULT_LR = 3e-4
DEFAULT_BATCH_SIZE = 32
DEFAULT_EPOCHS = 3
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


@dataclasses.dataclass
class StageSpec:
    stage_id: str
    trainable_patterns: List[str]
    frozen_patterns: List[str]
    data_selector: str
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int

    def validate(self, param_names: Sequence[str]) -> None:
        if self.stage_id not in STAGE_ORDER:
            raise ConfigError(f"unknown stage id {self.stage_id!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        for pattern in self.trainable_patterns + self.frozen_patterns:
            if not any(fnmatch.fnmatchcase(n, pattern) for n in param_names):
                raise ConfigError(f"{self.stage_id}: pattern {pattern!r} matches nothing")
        for name in param_names:
            t = any(fnmatch.fnmatchcase(name, p) for p in self.trainable_patterns)
            f = any(fnmatch.fnmatchcase(name, p) for p in self.frozen_patterns)
            if t and f:
                raise ConfigError(f"{self.stage_id}: {name} is both trainable and frozen")
            if not t and not f:
                raise ConfigError(f"{self.stage_id}: {name} matches no pattern")

    def is_trainable(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.trainable_patterns)


_BRANCH_FROZEN = ["vision.enc.*", "vision.qformer.*",
                  "audio.enc.*", "audio.qformer.*"]
_LLM_BASE = ["llm.embed.*", "llm.final_ln.*", "llm.*.ln1.*", "llm.*.ln2.*",
             "llm.*.ffn.*", "llm.*.attn.*.weight", "llm.*.attn.*.bias"]


def default_stage_spec(stage_id: str, learning_rate: float = DEFAULT_LR,
                       batch_size: int = DEFAULT_BATCH_SIZE,
                       epochs: int = DEFAULT_EPOCHS, seed: int = 0,
                       with_lora: bool = True) -> StageSpec:
    """The standard freeze schedule for each stage."""
    if stage_id == "S1_VISION":
        return StageSpec(stage_id, ["vision.qformer.*", "vision.proj.*"],
                         ["vision.enc.*", "audio.*", "llm.*"],
                         "reading_order", epochs, batch_size, learning_rate, seed)
    if stage_id == "S1_AUDIO":
        return StageSpec(stage_id, ["audio.qformer.*", "audio.proj.*"],
                         ["audio.enc.*", "vision.*", "llm.*"],
                         "transcription", epochs, batch_size, learning_rate, seed)
    if stage_id == "S2_ALIGN":
        return StageSpec(stage_id, ["vision.proj.*", "audio.proj.*"],
                         _BRANCH_FROZEN + ["llm.*"],
                         "align_pairs", epochs, batch_size, learning_rate, seed)
    if stage_id == "S3_FUSION":
        if with_lora:
            return StageSpec(stage_id,
                             ["vision.proj.*", "audio.proj.*", "llm.*.lora.*"],
                             _BRANCH_FROZEN + _LLM_BASE,
                             "qa", epochs, batch_size, learning_rate, seed)
        return StageSpec(stage_id, ["vision.proj.*", "audio.proj.*"],
                         _BRANCH_FROZEN + ["llm.*"],
                         "qa", epochs, batch_size, learning_rate, seed)
    raise ConfigError(f"unknown stage id {stage_id!r}")


def adam_step(params: Dict[str, T.Parameter], grads: Dict[str, np.ndarray],
              state: dict, lr: float, betas: Tuple[float, float] = DEFAULT_BETAS,
              eps: float = DEFAULT_EPS) -> Tuple[Dict[str, T.Parameter], dict]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    if not state:
        state.update({"t": 0, "m": {}, "v": {}})
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        if name not in grads:
            raise ContractError(f"no gradient supplied for {name}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} vs {p.data.shape}")
        m = state["m"].setdefault(name, np.zeros(p.data.shape))
        v = state["v"].setdefault(name, np.zeros(p.data.shape))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return params, state


# -- stage data -------------------------------------------------------


@dataclasses.dataclass
class LMItem:
    """One language-modeling example: branch streams, prompt, target."""
    vision_streams: List[np.ndarray]
    audio_streams: List[np.ndarray]
    prompt: np.ndarray
    target: np.ndarray


def build_stage_items(svs: Sequence[corpus.SubVideo], selector: str) -> list:
    items: list = []
    if selector == "reading_order":
        for sv in svs:
            for slide in sv.slides:
                s = corpus.make_reading_order_sample(slide)
                if s is None:
                    continue
                items.append(LMItem([s.input_ids], [],
                                    np.array([corpus.M_ORDER]), s.target_ids))
    elif selector == "transcription":
        for sv in svs:
            for i in range(len(sv.slides)):
                s = corpus.make_transcription_sample(sv, i)
                items.append(LMItem([], [s.input_ids],
                                    np.array([corpus.M_TRANS]), s.target_ids))
    elif selector == "align_pairs":
        for sv in svs:
            for i, slide in enumerate(sv.slides):
                items.append(((sv.id, i), corpus.slide_visual_ids(slide),
                              np.asarray(sv.transcripts[i], dtype=np.int64)))
    elif selector == "qa":
        for sv in svs:
            vision = [corpus.slide_visual_ids(s) for s in sv.slides]
            audio = [np.asarray(t, dtype=np.int64) for t in sv.transcripts]
            for qa in sv.qa:
                items.append(LMItem(vision, audio, np.asarray(qa.q),
                                    np.asarray(qa.a)))
    else:
        raise ConfigError(f"unknown data selector {selector!r}")
    if not items:
        raise ConfigError(f"selector {selector!r} produced no training items")
    return items


def lm_loss(model: Model, item: LMItem) -> T.Tensor:
    """Cross entropy on the target span given branch tokens and prompt."""
    vision = audio = None
    if item.vision_streams:
        parts = [model.branch_tokens("vision", ids) for ids in item.vision_streams]
        vision = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    if item.audio_streams:
        parts = [model.branch_tokens("audio", ids) for ids in item.audio_streams]
        audio = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    text = np.concatenate([item.prompt, item.target, [corpus.EOS]]).astype(np.int64)
    ctx = model.assemble_context(vision, audio, text)
    logits = model.decode(ctx)
    start, _stop = ctx.text_span()
    labels = np.full(len(ctx), T.IGNORE_INDEX, dtype=np.int64)
    for k in range(len(item.prompt), len(text)):
        labels[start + k - 1] = text[k]
    return T.cross_entropy_mean(logits, labels)


def _batch_loss(model: Model, batch: list, spec: StageSpec,
                align_opts: dict) -> T.Tensor:
    if spec.data_selector == "align_pairs":
        ids = [b[0] for b in batch]
        vision = [alignment.pool(model.branch_segment_features("vision", b[1]))
                  for b in batch]
        audio = [alignment.pool(model.branch_segment_features("audio", b[2]))
                 for b in batch]
        ab = alignment.AlignmentBatch.from_pooled(audio, vision, ids)
        return alignment.contrastive_loss(ab, **align_opts)
    total = None
    for item in batch:
        loss = lm_loss(model, item)
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(batch))


def _hash_params(model: Model, names: Sequence[str]) -> Dict[str, str]:
    return {n: hashlib.sha256(model.params[n].data.tobytes()).hexdigest()
            for n in names}


def run_stage(model: Model, svs: Sequence[corpus.SubVideo], spec: StageSpec,
              align_tau: float = alignment.DEFAULT_TAU,
              align_direction: str = "a2v",
              align_strict: bool = False) -> CheckpointData:
    """Run one stage and return an in-memory checkpoint of the result."""
    names = list(model.params)
    spec.validate(names)
    for name in names:
        model.params[name].requires_grad = spec.is_trainable(name)
    frozen_names = [n for n in names if not spec.is_trainable(n)]
    before = _hash_params(model, frozen_names)

    items = build_stage_items(svs, spec.data_selector)
    align_opts = {"tau": align_tau, "direction": align_direction,
                  "strict_paper_f": align_strict}
    rng = np.random.default_rng([spec.seed, 31, STAGE_ORDER.index(spec.stage_id)])
    trainable = {n: model.params[n] for n in names if spec.is_trainable(n)}
    state: dict = {}
    losses: List[float] = []
    for _epoch in range(spec.epochs):
        order = rng.permutation(len(items))
        for lo in range(0, len(items), spec.batch_size):
            batch = [items[i] for i in order[lo:lo + spec.batch_size]]
            model.zero_grads()
            loss = _batch_loss(model, batch, spec, align_opts)
            loss.backward()
            grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
            adam_step({n: trainable[n] for n in grads}, grads, state,
                      spec.learning_rate)
            losses.append(float(loss.data[0]))

    after = _hash_params(model, frozen_names)
    changed = [n for n in frozen_names if before[n] != after[n]]
    if changed:
        raise ContractError(f"{spec.stage_id}: frozen parameters changed: {changed[:5]}")
    _check_progress(spec.stage_id, losses)

    meta = {"stage": spec.stage_id, "seed": spec.seed,
            "step_count": len(losses), "loss_history": losses,
            "model_config": model.config.to_dict()}
    return CheckpointData(spec.stage_id, spec.seed, model.state(), meta)


def _check_progress(stage_id: str, losses: List[float]) -> None:
    if len(losses) < 2:
        return
    w = max(1, len(losses) // 5)
    first = float(np.mean(losses[:w]))
    last = float(np.mean(losses[-w:]))
    if not (last < first):
        raise TrainingDivergedError(
            f"{stage_id}: loss did not decrease (start {first:.4f}, end {last:.4f})")


def _check_stage_sequence(stage_ids: Sequence[str]) -> None:
    if not stage_ids:
        raise ConfigError("at least one training stage is required")
    try:
        indices = [STAGE_ORDER.index(s) for s in stage_ids]
    except ValueError as exc:
        raise ConfigError(f"unknown stage in {list(stage_ids)}") from exc
    if any(b <= a for a, b in zip(indices, indices[1:])):
        raise ConfigError(
            f"stages must be a subsequence of {list(STAGE_ORDER)}, got {list(stage_ids)}")


def train_pipeline(model: Model, svs: Sequence[corpus.SubVideo],
                   stage_ids: Sequence[str],
                   learning_rate: float = DEFAULT_LR,
                   batch_size: int = DEFAULT_BATCH_SIZE,
                   epochs: int = DEFAULT_EPOCHS,
                   seed: int = 0,
                   lora_rank: int = 4, lora_alpha: float = 8.0,
                   align_tau: float = alignment.DEFAULT_TAU,
                   align_direction: str = "a2v", align_strict: bool = False,
                   s3_with_lora: bool = True,
                   on_stage_end=None) -> CheckpointData:
    """Run the listed stages in order, each on the previous result.

    ``on_stage_end(checkpoint)`` fires after each stage, for saving.
    """
    _check_stage_sequence(stage_ids)
    lineage: List[str] = []
    final: Optional[CheckpointData] = None
    lora_meta = None
    for sid in stage_ids:
        with_lora = s3_with_lora and sid == "S3_FUSION"
        if with_lora and not model.adapters:
            targets = lora.default_targets(model.config.n_dec_layers)
            lora.attach_targets(model, lora_rank, lora_alpha, targets, seed=seed)
            lora_meta = {"rank": lora_rank, "alpha": lora_alpha, "targets": targets}
        spec = default_stage_spec(sid, learning_rate, batch_size, epochs, seed,
                                  with_lora=with_lora)
        ckpt = run_stage(model, svs, spec, align_tau, align_direction, align_strict)
        lineage.append(sid)
        ckpt.meta["lineage"] = list(lineage)
        ckpt.meta["lora"] = lora_meta
        if on_stage_end is not None:
            on_stage_end(ckpt)
        final = ckpt
    return final


def ablate(model: Model, svs: Sequence[corpus.SubVideo], skip: str,
           **pipeline_kwargs) -> CheckpointData:
    """Full pipeline minus one stage family.

    Skipping S3 does not drop fusion data entirely: the stage still
    runs on QA items, but without adapters, so only the projections
    move under the fusion objective.
    """
    if skip not in ABLATABLE:
        raise ConfigError(f"skip must be one of {ABLATABLE}, got {skip!r}")
    stages = {
        "S1": ["S2_ALIGN", "S3_FUSION"],
        "S2": ["S1_VISION", "S1_AUDIO", "S3_FUSION"],
        "S3": list(STAGE_ORDER),
    }[skip]
    ckpt = train_pipeline(model, svs, stages,
                          s3_with_lora=(skip != "S3"), **pipeline_kwargs)
    ckpt.meta["ablation"] = skip
    return ckpt


def model_from_checkpoint(ckpt: CheckpointData) -> Model:
    """Rebuild a model (adapters included) from a checkpoint."""
    from .model import ModelConfig

    if not ckpt.meta or "model_config" not in ckpt.meta:
        raise ConfigError("checkpoint has no model_config sidecar entry")
    model = Model(ModelConfig.from_dict(ckpt.meta["model_config"]))
    lora_meta = ckpt.meta.get("lora")
    if lora_meta:
        lora.attach_targets(model, int(lora_meta["rank"]),
                            float(lora_meta["alpha"]),
                            [str(t) for t in lora_meta["targets"]], seed=ckpt.seed)
    model.load_state(ckpt.params)
    return model
