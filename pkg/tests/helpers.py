"""Shared test helpers, including an independent QA answer resolver."""

import numpy as np

from avdoc import corpus


def resolve_answer(sv, qa):
    """Recompute a question's answer from the raw record alone.

    Mirrors the stated semantics of each question form instead of the
    generator's bookkeeping: slide lookups for extraction, narration
    scans for audio facts, first-occurrence order for temporal items.
    """
    q = qa.q
    if q[0] == corpus.Q_IE:
        slide = sv.slides[q[1] - corpus.SLIDE_TOK0]
        return [dict(slide.facts)[q[2]]]
    if q[0] == corpus.Q_CC and q[1] == corpus.CM:
        for slide in sv.slides:
            for pos, (k, v) in enumerate(slide.facts):
                if v == corpus.CM:
                    return [_narrated_pair_value(sv, slide.slide_index, pos)]
        raise AssertionError("cross-modal question without a marked fact")
    if q[0] == corpus.Q_CC:
        target = corpus.audio_token(q[1])
        for stream in sv.transcripts:
            for i, t in enumerate(stream):
                if t == target:
                    return [stream[i + 1] - corpus.AUDIO_OFFSET]
        raise AssertionError("audio question key never narrated")
    assert q[0] == corpus.Q_TA
    occ = _first_occurrences(sv)
    if q[1] == corpus.T_FIRST:
        return [corpus.slide_token(occ[q[2]][0])]
    assert q[1] == corpus.T_ORDER
    return [corpus.A_BEFORE] if occ[q[2]] < occ[q[3]] else [corpus.A_AFTER]


def _narrated_pair_value(sv, slide_index, fact_pos):
    content = [t for t in sv.transcripts[slide_index]
               if corpus.AUDIO0 <= t < corpus.AUDIO_END]
    n_title = len(sv.slides[slide_index].title)
    return content[n_title + 2 * fact_pos + 1] - corpus.AUDIO_OFFSET


def _first_occurrences(sv):
    occ = {}
    for slide in sv.slides:
        for pos, (k, _) in enumerate(slide.facts):
            if k not in occ:
                occ[k] = (slide.slide_index, pos)
    return occ


def answer_tokens_visible(sv):
    """Token sets visible on slides versus narrated, for tag audits."""
    on_slides = set()
    for slide in sv.slides:
        for k, v in slide.facts:
            on_slides.add(k)
            on_slides.add(v)
    narrated = {t - corpus.AUDIO_OFFSET for stream in sv.transcripts
                for t in stream if corpus.AUDIO0 <= t < corpus.AUDIO_END}
    return on_slides, narrated
