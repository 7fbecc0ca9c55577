"""Contrastive alignment of pooled audio and vision embeddings.

Each batch pairs one audio embedding and one vision embedding per
segment. The loss pushes matched pairs together and mismatched pairs
apart: for every audio row, the other vision rows in the batch act as
negatives. With the default similarity, exp(cosine / tau), the loss is
exactly a softmax cross entropy over the scaled cosine matrix.

A strict variant uses the raw cosine itself as the similarity measure,
clamped to a small positive floor so logs stay finite. It is kept for
comparison and is not the default.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

DEFAULT_TAU = 0.07
STRICT_FLOOR = 1e-6

DIRECTIONS = ("a2v", "symmetric")


def pool(tokens: T.Tensor) -> T.Tensor:
    """Collapse a (n, d) token block to one unit-norm (d,) embedding.

    Rows are averaged, then L2-normalized; a zero mean (for instance
    two exactly opposite rows) is degenerate and raises.
    """
    if tokens.data.ndim != 2:
        raise DimensionError(f"pool expects a 2-D token block, got {tokens.shape}")
    return T.unit(T.mean_rows(tokens))


def similarity_f(e_a: T.Tensor, e_v: T.Tensor, tau: float = DEFAULT_TAU) -> T.Tensor:
    """Pairwise similarity measure exp(cosine(e_a, e_v) / tau)."""
    _check_tau(tau)
    return T.exp(T.scale(T.cosine(e_a, e_v), 1.0 / tau))


@dataclasses.dataclass
class AlignmentBatch:
    """Pooled embeddings for B segments, one audio/vision pair each.

    ``segment_ids`` must be unique: a duplicated segment would appear
    as its own negative with a matching positive, corrupting the loss.
    """

    audio: T.Tensor
    vision: T.Tensor
    segment_ids: Tuple

    def __post_init__(self):
        if self.audio.data.ndim != 2 or self.vision.data.ndim != 2:
            raise DimensionError("alignment embeddings must be 2-D (batch, features)")
        if self.audio.shape != self.vision.shape:
            raise DimensionError(
                f"audio and vision batches differ: {self.audio.shape} vs {self.vision.shape}")
        ids = tuple(self.segment_ids)
        if len(ids) != self.audio.shape[0]:
            raise ContractError("one segment id per batch row is required")
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate segment ids in one alignment batch")
        self.segment_ids = ids

    @classmethod
    def from_pooled(cls, audio: Sequence[T.Tensor], vision: Sequence[T.Tensor],
                    segment_ids: Sequence) -> "AlignmentBatch":
        if len(audio) != len(vision):
            raise ContractError("audio and vision embedding counts differ")
        return cls(T.concat_rows(list(audio)), T.concat_rows(list(vision)), tuple(segment_ids))

    def __len__(self) -> int:
        return self.audio.shape[0]


def contrastive_loss(batch: AlignmentBatch, tau: float = DEFAULT_TAU,
                     direction: str = "a2v", strict_paper_f: bool = False) -> T.Tensor:
    """Batch-negative contrastive loss over an alignment batch.

    Returns the mean over rows of -log(f(a_i, v_i) / sum_k f(a_i, v_k)).
    ``direction`` picks which side supplies the anchors: ``a2v`` uses
    audio anchors against vision candidates; ``symmetric`` averages both
    directions.
    """
    _check_tau(tau)
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    an = T.l2_normalize_rows(batch.audio)
    vn = T.l2_normalize_rows(batch.vision)
    cos = T.matmul(an, T.transpose(vn))
    if strict_paper_f:
        loss = _strict_nll(cos)
        if direction == "symmetric":
            loss = T.scale(T.add(loss, _strict_nll(T.transpose(cos))), 0.5)
        return loss
    diag = np.arange(len(batch))
    logits = T.scale(cos, 1.0 / tau)
    loss = T.cross_entropy_mean(logits, diag)
    if direction == "symmetric":
        other = T.cross_entropy_mean(T.transpose(logits), diag)
        loss = T.scale(T.add(loss, other), 0.5)
    return loss


def _strict_nll(cos: T.Tensor) -> T.Tensor:
    # Raw cosines as similarities, floored so the log of a zero or
    # negative match cannot blow up.
    f = T.clamp_min(cos, STRICT_FLOOR)
    per_row = T.sub(T.log(T.diag_part(f)), T.log(T.row_sums(f)))
    b = cos.shape[0]
    return T.scale(T.sum_all(per_row), -1.0 / b)


def _check_tau(tau: float) -> None:
    if not (isinstance(tau, (int, float)) and tau > 0):
        raise ConfigError(f"tau must be a positive number, got {tau!r}")
