"""Bridging corpus records to model contexts.

Both branches compress each slide independently: the vision branch
reads the slide's tagged block stream, the audio branch reads that
slide's narration, and the per-slide token blocks are concatenated in
slide order. A modality mask names the branch that stays visible.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from . import corpus
from . import tensor as T
from .errors import ConfigError
from .model import Context, Model

MODALITIES = ("both", "visual_only", "audio_only")


def check_modality(modality: str) -> None:
    if modality not in MODALITIES:
        raise ConfigError(f"modality must be one of {MODALITIES}, got {modality!r}")


def slide_ids(sv: corpus.SubVideo, slide_index: int, branch: str) -> np.ndarray:
    """Raw branch input ids for one slide of a sub-video."""
    if branch == "vision":
        return corpus.slide_visual_ids(sv.slides[slide_index])
    return np.asarray(sv.transcripts[slide_index], dtype=np.int64)


def slide_branch_tokens(model: Model, sv: corpus.SubVideo, slide_index: int,
                        branch: str) -> T.Tensor:
    """Compressed token block for one slide through one branch."""
    return model.branch_tokens(branch, slide_ids(sv, slide_index, branch))


def slide_segment_features(model: Model, sv: corpus.SubVideo, slide_index: int,
                           branch: str) -> T.Tensor:
    """Uncompressed projected features for one slide, for alignment."""
    return model.branch_segment_features(branch, slide_ids(sv, slide_index, branch))


def subvideo_branch_tokens(model: Model, sv: corpus.SubVideo,
                           modality: str = "both",
                           ) -> Tuple[Optional[T.Tensor], Optional[T.Tensor]]:
    """Per-slide token blocks for each unmasked branch, in slide order."""
    check_modality(modality)
    vision = audio = None
    if modality != "audio_only":
        parts = [slide_branch_tokens(model, sv, i, "vision")
                 for i in range(len(sv.slides))]
        vision = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    if modality != "visual_only":
        parts = [slide_branch_tokens(model, sv, i, "audio")
                 for i in range(len(sv.slides))]
        audio = parts[0] if len(parts) == 1 else T.concat_rows(parts)
    return vision, audio


def qa_context(model: Model, sv: corpus.SubVideo, text_ids,
               modality: str = "both") -> Context:
    vision, audio = subvideo_branch_tokens(model, sv, modality)
    return model.assemble_context(vision, audio, np.asarray(text_ids, dtype=np.int64))


def retrieval_top1(model: Model, svs, limit: int = 32) -> float:
    """Audio-to-slide retrieval accuracy over pooled slide embeddings.

    Takes the first ``limit`` slides in manifest order, embeds each
    side, and scores the fraction of narrations whose nearest slide
    embedding is their own slide.
    """
    from . import alignment

    pairs = []
    for sv in svs:
        for i in range(len(sv.slides)):
            pairs.append((sv, i))
    pairs = pairs[:limit]
    if len(pairs) < 2:
        raise ConfigError("retrieval needs at least two slide pairs")
    with T.no_grad():
        a = np.stack([alignment.pool(slide_segment_features(model, sv, i, "audio")).data
                      for sv, i in pairs])
        v = np.stack([alignment.pool(slide_segment_features(model, sv, i, "vision")).data
                      for sv, i in pairs])
    hits = np.argmax(a @ v.T, axis=1) == np.arange(len(pairs))
    return float(np.mean(hits))
