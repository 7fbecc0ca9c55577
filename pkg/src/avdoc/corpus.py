"""Deterministic synthetic corpus of narrated slide videos.

Each sub-video is 1 to 3 slides from one of 23 domains. A slide is a
title plus a short list of key/value fact pairs in reading order; what
an OCR pass would see is those blocks scrambled by a layout
permutation, each block prefixed with a tag naming its true position.
The narration track is a token stream per slide: the slide's content
pushed through a fixed bijective token mapping, interleaved with
filler tokens, plus facts that exist only in the narration.

Question/answer pairs come in three categories with exact answers by
construction: fact extraction from a named slide (visual only),
narration-fact lookup (audio only) or joining a marked slide key with
its narrated value (cross modal), and reading-order or slide-order
questions (temporal).

All randomness for sub-video ``i`` derives from ``(seed, i)``, so any
record can be regenerated in isolation and generation order never
matters.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataFormatError

VOCAB_SIZE = 512

# Structural token ids.
EOS = 0
ANS = 1
Q_IE = 2
Q_CC = 3
Q_TA = 4
T_FIRST = 5
T_ORDER = 6
A_BEFORE = 7
A_AFTER = 8
M_ORDER = 9
M_TRANS = 10
CM = 11

POS_TAG0 = 16
N_POS_TAGS = 16
SLIDE_TOK0 = 32
N_SLIDE_TOKS = 8
TITLE0 = 40
N_TITLES = 64
KEY0 = 104
N_KEYS = 48
VALUE0 = 152
N_VALUES = 64
AUDIO_OFFSET = 208  # bijection from slide-content ids to narration ids
AUDIO0 = TITLE0 + AUDIO_OFFSET
AUDIO_END = VALUE0 + N_VALUES + AUDIO_OFFSET
FILLER0 = 424
N_FILLERS = 32

DOMAINS = (
    "agriculture", "astronomy", "biology", "chemistry", "cooking", "ecology",
    "economics", "education", "finance", "fitness", "geography", "history",
    "law", "linguistics", "marketing", "medicine", "music", "physics",
    "robotics", "security", "software", "sports", "travel",
)

CATEGORIES = ("InformationExtraction", "ContentComprehension", "TemporalAwareness")
ANSWERABILITIES = ("visual_only", "audio_only", "cross_modal", "temporal")

SLIDE_SECONDS = (10.0, 25.0)
GAP_SECONDS = (0.2, 0.6)


def audio_token(t: int) -> int:
    """Map a slide-content token to its narration counterpart."""
    if not (TITLE0 <= t < VALUE0 + N_VALUES):
        raise ConfigError(f"token {t} has no narration counterpart")
    return t + AUDIO_OFFSET


def narration_pairs() -> List[Tuple[int, int]]:
    """All (content id, narration id) pairs under the token mapping."""
    return [(t, audio_token(t)) for t in range(TITLE0, VALUE0 + N_VALUES)]


def pos_tag(i: int) -> int:
    if not (0 <= i < N_POS_TAGS):
        raise ConfigError(f"position tag index {i} out of range")
    return POS_TAG0 + i


def slide_token(i: int) -> int:
    if not (0 <= i < N_SLIDE_TOKS):
        raise ConfigError(f"slide token index {i} out of range")
    return SLIDE_TOK0 + i


@dataclasses.dataclass
class Slide:
    """One slide: a title block plus fact blocks in reading order.

    ``layout`` is the scrambled order an OCR pass would emit: the block
    at surface position p is block ``layout[p]`` of the true order.
    """

    slide_index: int
    title: List[int]
    facts: List[Tuple[int, int]]
    layout: List[int]

    def blocks(self) -> List[List[int]]:
        head = [slide_token(self.slide_index)] + list(self.title)
        return [head] + [[k, v] for k, v in self.facts]


@dataclasses.dataclass
class QAPair:
    q: List[int]
    a: List[int]
    category: str
    answerability: str


@dataclasses.dataclass
class SubVideo:
    id: str
    domain: str
    slides: List[Slide]
    transcripts: List[List[int]]
    timestamps: List[Tuple[float, float]]
    qa: List[QAPair]

    @property
    def duration(self) -> float:
        return self.timestamps[-1][1] - self.timestamps[0][0]


@dataclasses.dataclass(frozen=True)
class InstructionSample:
    """A branch-input token sequence and its text target."""

    input_ids: np.ndarray
    target_ids: np.ndarray


def domain_vocab(domain_index: int) -> Dict[str, List[int]]:
    """Per-domain title/key/value sub-vocabularies (wrapping windows)."""
    titles = [TITLE0 + (2 * domain_index + j) % N_TITLES for j in range(8)]
    keys = [KEY0 + (2 * domain_index + j) % N_KEYS for j in range(12)]
    values = [VALUE0 + (3 * domain_index + j) % N_VALUES for j in range(16)]
    return {"titles": titles, "keys": keys, "values": values}


def slide_visual_ids(slide: Slide) -> np.ndarray:
    """What the vision branch sees: tagged blocks in layout order."""
    blocks = slide.blocks()
    out: List[int] = []
    for true_index in slide.layout:
        out.append(pos_tag(true_index))
        out.extend(blocks[true_index])
    return np.asarray(out, dtype=np.int64)


def make_reading_order_sample(slide: Slide) -> Optional[InstructionSample]:
    """Restore-reading-order task: scrambled tagged blocks to true order.

    Returns None for slides with fewer than two blocks; there is no
    ordering signal to learn from.
    """
    blocks = slide.blocks()
    if len(blocks) < 2:
        return None
    target: List[int] = []
    for i, block in enumerate(blocks):
        target.append(pos_tag(i))
        target.extend(block)
    return InstructionSample(slide_visual_ids(slide), np.asarray(target, dtype=np.int64))


def make_transcription_sample(subvideo: SubVideo, slide_index: int) -> InstructionSample:
    """Transcription task: the narration stream copied verbatim."""
    ids = np.asarray(subvideo.transcripts[slide_index], dtype=np.int64)
    return InstructionSample(ids, ids.copy())


def _subvideo_keys(rng: np.random.Generator, vocab: Dict[str, List[int]],
                   n_slides: int) -> Tuple[List[List[int]], List[int], int]:
    """Draw distinct keys: per-slide visual pairs, audio keys, teaser key.

    When the sub-video has several slides, one visual key repeats on a
    later slide so order questions have something to ask about.
    """
    need = n_slides * 3 + 1  # 2 visual + 1 audio per slide, 1 teaser
    pool = list(rng.permutation(vocab["keys"]))
    if need > len(pool):
        raise ConfigError("vocab too small for requested fact diversity")
    draw = [int(pool.pop()) for _ in range(need)]
    visual = [[draw[2 * i], draw[2 * i + 1]] for i in range(n_slides)]
    audio = draw[2 * n_slides:3 * n_slides]
    teaser = draw[-1]
    if n_slides >= 2:
        # Repeat the first slide's first key on the last slide.
        visual[-1][1] = visual[0][0]
    return visual, audio, teaser


def make_subvideo(seed: int, index: int, domain_count: int,
                  qa_per_subvideo: int) -> SubVideo:
    """Build sub-video ``index`` from nothing but (seed, index)."""
    rng = np.random.default_rng([seed, 11, index])
    domain_index = index % domain_count
    vocab = domain_vocab(domain_index)
    n_slides = int(rng.integers(1, 4))

    visual_keys, audio_keys, teaser_key = _subvideo_keys(rng, vocab, n_slides)
    teaser_slide = int(rng.integers(0, n_slides))
    teaser_value = int(rng.choice(vocab["values"]))

    slides: List[Slide] = []
    transcripts: List[List[int]] = []
    audio_facts: List[Tuple[int, int]] = []
    for i in range(n_slides):
        title = [int(rng.choice(vocab["titles"]))]
        facts = [(k, int(rng.choice(vocab["values"]))) for k in visual_keys[i]]
        if i == teaser_slide:
            facts.append((teaser_key, CM))
        layout = [int(p) for p in rng.permutation(len(facts) + 1)]
        slide = Slide(i, title, facts, layout)
        slides.append(slide)

        audio_fact = (audio_keys[i], int(rng.choice(vocab["values"])))
        audio_facts.append(audio_fact)
        units = [[audio_token(t) for t in title]]
        for k, v in facts:
            if v == CM:
                units.append([audio_token(k), audio_token(teaser_value)])
            else:
                units.append([audio_token(k), audio_token(v)])
        units.append([audio_token(audio_fact[0]), audio_token(audio_fact[1])])
        stream: List[int] = []
        for u, unit in enumerate(units):
            if u > 0:
                stream.extend(int(FILLER0 + f) for f in
                              rng.integers(0, N_FILLERS, size=int(rng.integers(0, 3))))
            stream.extend(unit)
        transcripts.append(stream)

    start = round(float(rng.uniform(0.0, 3600.0)), 3)
    timestamps: List[Tuple[float, float]] = []
    t = start
    for i in range(n_slides):
        end = t + float(rng.uniform(*SLIDE_SECONDS))
        timestamps.append((round(t, 3), round(end, 3)))
        t = end + float(rng.uniform(*GAP_SECONDS))

    sv = SubVideo(f"sv{index:06d}", DOMAINS[domain_index], slides, transcripts,
                  timestamps, [])
    sv.qa = gen_qa(sv, rng, qa_per_subvideo,
                   audio_facts=audio_facts,
                   teaser=(teaser_slide, teaser_key, teaser_value))
    return sv


def gen_qa(subvideo: SubVideo, rng: np.random.Generator,
           qa_per_subvideo: int = 6, audio_facts=None, teaser=None) -> List[QAPair]:
    """Template QA covering all three categories.

    ``audio_facts`` and ``teaser`` come from generation; when absent
    (rebuilding QA for an already-built sub-video) they are recovered
    from the transcripts.
    """
    if audio_facts is None:
        audio_facts = [recover_audio_fact(subvideo, i) for i in range(len(subvideo.slides))]
    if teaser is None:
        teaser = recover_teaser(subvideo)
    teaser_slide, teaser_key, teaser_value = teaser
    n_slides = len(subvideo.slides)

    out: List[QAPair] = []
    cc_flip = 0
    for j in range(qa_per_subvideo):
        category = CATEGORIES[j % 3]
        if category == "InformationExtraction":
            i = int(rng.integers(0, n_slides))
            plain = [(k, v) for k, v in subvideo.slides[i].facts if v != CM]
            k, v = plain[int(rng.integers(0, len(plain)))]
            out.append(QAPair([Q_IE, slide_token(i), k, ANS], [v],
                              category, "visual_only"))
        elif category == "ContentComprehension":
            if cc_flip % 2 == 0 or teaser_key is None:
                i = int(rng.integers(0, n_slides))
                k, v = audio_facts[i]
                out.append(QAPair([Q_CC, k, ANS], [v], category, "audio_only"))
            else:
                out.append(QAPair([Q_CC, CM, ANS], [teaser_value],
                                  category, "cross_modal"))
            cc_flip += 1
        else:
            out.append(_temporal_qa(subvideo, rng))
    return out


def _temporal_qa(subvideo: SubVideo, rng: np.random.Generator) -> QAPair:
    slides = subvideo.slides
    if len(slides) >= 2 and rng.integers(0, 2) == 0:
        # Which slide first shows this key?
        occurrences: Dict[int, int] = {}
        for s in slides:
            for k, v in s.facts:
                if v != CM and k not in occurrences:
                    occurrences[k] = s.slide_index
        keys = sorted(occurrences)
        k = int(keys[int(rng.integers(0, len(keys)))])
        return QAPair([Q_TA, T_FIRST, k, ANS], [slide_token(occurrences[k])],
                      "TemporalAwareness", "temporal")
    if len(slides) >= 2:
        # Order of two keys from different slides.
        i, j = sorted(rng.choice(len(slides), size=2, replace=False))
        k1 = slides[int(i)].facts[0][0]
        k2 = slides[int(j)].facts[0][0]
        if rng.integers(0, 2) == 0:
            return QAPair([Q_TA, T_ORDER, k1, k2, ANS], [A_BEFORE],
                          "TemporalAwareness", "temporal")
        return QAPair([Q_TA, T_ORDER, k2, k1, ANS], [A_AFTER],
                      "TemporalAwareness", "temporal")
    # Single slide: reading order within the slide.
    facts = [(k, v) for k, v in slides[0].facts]
    a, b = sorted(rng.choice(len(facts), size=2, replace=False))
    k1, k2 = facts[int(a)][0], facts[int(b)][0]
    if rng.integers(0, 2) == 0:
        return QAPair([Q_TA, T_ORDER, k1, k2, ANS], [A_BEFORE],
                      "TemporalAwareness", "temporal")
    return QAPair([Q_TA, T_ORDER, k2, k1, ANS], [A_AFTER],
                  "TemporalAwareness", "temporal")


def recover_audio_fact(subvideo: SubVideo, slide_index: int) -> Tuple[int, int]:
    """The narration-only fact of a slide: its last non-filler pair."""
    content = [t for t in subvideo.transcripts[slide_index]
               if AUDIO0 <= t < AUDIO_END]
    return (content[-2] - AUDIO_OFFSET, content[-1] - AUDIO_OFFSET)


def recover_teaser(subvideo: SubVideo):
    """Find the slide fact marked CM and its narrated value."""
    for slide in subvideo.slides:
        for pos, (k, v) in enumerate(slide.facts):
            if v == CM:
                content = [t for t in subvideo.transcripts[slide.slide_index]
                           if AUDIO0 <= t < AUDIO_END]
                # Skip the title, then pairs follow reading order.
                value = content[1 + 2 * pos + 1] - AUDIO_OFFSET
                return (slide.slide_index, k, value)
    return (None, None, None)


def gen_corpus(seed: int, n_subvideos: int, domain_count: int = 23,
               qa_per_subvideo: int = 6) -> List[SubVideo]:
    """Generate the full corpus, ordered by sub-video id."""
    if n_subvideos < 1 or domain_count < 1 or qa_per_subvideo < 1:
        raise ConfigError("all corpus counts must be at least 1")
    if domain_count > len(DOMAINS):
        raise ConfigError(f"at most {len(DOMAINS)} domains are supported")
    if qa_per_subvideo > 100:
        raise ConfigError("qa_per_subvideo above 100 is not supported")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"corpus seed must be a non-negative integer, got {seed!r}")
    return [make_subvideo(seed, i, domain_count, qa_per_subvideo)
            for i in range(n_subvideos)]


def split(manifest: Sequence[SubVideo], ratios: Sequence[float],
          seed: int) -> Tuple[List[SubVideo], List[SubVideo], List[SubVideo]]:
    """Deterministic domain-stratified train/val/test split.

    Items are shuffled within each domain, interleaved so every domain
    spreads evenly, and cut at exact global boundaries; each split gets
    its proportional share of every domain within one item.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"need three positive split ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    by_domain: Dict[str, List[SubVideo]] = {}
    for sv in manifest:
        by_domain.setdefault(sv.domain, []).append(sv)

    keyed = []
    for rank, domain in enumerate(sorted(by_domain)):
        items = sorted(by_domain[domain], key=lambda s: s.id)
        order = np.random.default_rng([seed, 23, rank]).permutation(len(items))
        for j, idx in enumerate(order):
            keyed.append(((j + 0.5) / len(items), rank, j, items[int(idx)]))
    keyed.sort(key=lambda e: e[:3])
    ordered = [e[3] for e in keyed]

    n = len(ordered)
    counts = [int(np.floor(r * n)) for r in ratios]
    remainders = [r * n - c for r, c in zip(ratios, counts)]
    while sum(counts) < n:
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    if any(c == 0 for c in counts):
        raise ConfigError(f"split of {n} items by {ratios} leaves an empty split")
    train = ordered[:counts[0]]
    val = ordered[counts[0]:counts[0] + counts[1]]
    test = ordered[counts[0] + counts[1]:]
    return train, val, test


# -- manifest serialization -------------------------------------------


def subvideo_to_dict(sv: SubVideo) -> dict:
    return {
        "id": sv.id,
        "domain": sv.domain,
        "slides": [{"title": list(s.title),
                    "facts": [[int(k), int(v)] for k, v in s.facts],
                    "layout": list(s.layout)} for s in sv.slides],
        "transcripts": [list(t) for t in sv.transcripts],
        "timestamps": [[a, b] for a, b in sv.timestamps],
        "qa": [{"q": list(p.q), "a": list(p.a), "category": p.category,
                "answerability": p.answerability} for p in sv.qa],
    }


def subvideo_from_dict(d: dict) -> SubVideo:
    try:
        slides = [Slide(i, [int(t) for t in s["title"]],
                        [(int(k), int(v)) for k, v in s["facts"]],
                        [int(p) for p in s["layout"]])
                  for i, s in enumerate(d["slides"])]
        qa = [QAPair([int(t) for t in p["q"]], [int(t) for t in p["a"]],
                     str(p["category"]), str(p["answerability"]))
              for p in d["qa"]]
        sv = SubVideo(str(d["id"]), str(d["domain"]), slides,
                      [[int(t) for t in tr] for tr in d["transcripts"]],
                      [(float(a), float(b)) for a, b in d["timestamps"]], qa)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"malformed sub-video record: {exc}") from exc
    _validate_subvideo(sv)
    return sv


def _validate_subvideo(sv: SubVideo) -> None:
    if not (1 <= len(sv.slides) <= 3):
        raise DataFormatError(f"{sv.id}: slide count {len(sv.slides)} outside 1..3")
    if len(sv.transcripts) != len(sv.slides) or len(sv.timestamps) != len(sv.slides):
        raise DataFormatError(f"{sv.id}: transcripts/timestamps do not match slides")
    flat = [t for pair in sv.timestamps for t in pair]
    if any(b <= a for a, b in zip(flat, flat[1:])):
        raise DataFormatError(f"{sv.id}: timestamps not strictly increasing")
    for s in sv.slides:
        keys = [k for k, _ in s.facts]
        if len(set(keys)) != len(keys):
            raise DataFormatError(f"{sv.id}: duplicate key on slide {s.slide_index}")
        if sorted(s.layout) != list(range(len(s.facts) + 1)):
            raise DataFormatError(f"{sv.id}: layout is not a block permutation")
        for t in [slide_token(s.slide_index)] + s.title + [x for f in s.facts for x in f]:
            if not (0 <= t < VOCAB_SIZE):
                raise DataFormatError(f"{sv.id}: token {t} outside vocabulary")
    for tr in sv.transcripts:
        if not tr:
            raise DataFormatError(f"{sv.id}: empty transcript")
        if any(not (0 <= t < VOCAB_SIZE) for t in tr):
            raise DataFormatError(f"{sv.id}: narration token outside vocabulary")
    if not sv.qa:
        raise DataFormatError(f"{sv.id}: no QA pairs")
    for p in sv.qa:
        if p.category not in CATEGORIES:
            raise DataFormatError(f"{sv.id}: unknown category {p.category!r}")
        if p.answerability not in ANSWERABILITIES:
            raise DataFormatError(f"{sv.id}: unknown answerability {p.answerability!r}")
        if not p.a:
            raise DataFormatError(f"{sv.id}: empty answer")
        if any(not (0 <= t < VOCAB_SIZE) for t in p.q + p.a):
            raise DataFormatError(f"{sv.id}: QA token outside vocabulary")


def write_manifest(subvideos: Sequence[SubVideo], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sv in subvideos:
            fh.write(json.dumps(subvideo_to_dict(sv), separators=(",", ":")))
            fh.write("\n")


def read_manifest(path: str) -> List[SubVideo]:
    out: List[SubVideo] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            try:
                out.append(subvideo_from_dict(d))
            except DataFormatError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    if not out:
        raise DataFormatError(f"{path}: empty manifest")
    return out
