"""Thresholded semantic-similarity evaluation.

A prediction scores against its reference by greedy token-embedding
F1 over a frozen random embedding table, and counts as correct when
the score strictly exceeds the threshold. Reports break accuracy down
by domain and by question category and carry a 20-bin score histogram.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import contexts, corpus
from .errors import ConfigError, ContractError, DataFormatError, DegenerateError
from .model import Model

METRIC_SEED = 9001
METRIC_DIM = 32
DEFAULT_THRESHOLD = 0.8
N_HIST_BINS = 20


def metric_table(vocab_size: int) -> np.ndarray:
    """Frozen unit-norm token embeddings used only by the metric."""
    if vocab_size < 1:
        raise ConfigError(f"vocab_size must be positive, got {vocab_size}")
    rng = np.random.default_rng(METRIC_SEED)
    table = rng.standard_normal((vocab_size, METRIC_DIM))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def semantic_score(pred: Sequence[int], ref: Sequence[int],
                   table: np.ndarray) -> float:
    """Greedy token-embedding F1 in [0, 1].

    Identical sequences score exactly 1.0; an empty prediction scores
    0. Token pairs with equal ids count as similarity 1.0 exactly;
    unequal pairs use the cosine of their table rows, floored at 0.
    """
    pred = [int(t) for t in pred]
    ref = [int(t) for t in ref]
    if pred == ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    hi = table.shape[0]
    if any(not (0 <= t < hi) for t in pred + ref):
        raise ConfigError("token id outside the metric table")
    sim = np.maximum(table[pred] @ table[ref].T, 0.0)
    sim[np.equal.outer(np.asarray(pred), np.asarray(ref))] = 1.0
    precision = float(np.mean(sim.max(axis=1)))
    recall = float(np.mean(sim.max(axis=0)))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclasses.dataclass
class EvalItem:
    subvideo_id: str
    domain: str
    category: str
    answerability: str
    reference: List[int]
    prediction: List[int]


@dataclasses.dataclass
class EvalReport:
    threshold: float
    n: int
    overall: float
    per_domain: Dict[str, float]
    per_category: Dict[str, float]
    histogram: List[int]

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "n": self.n,
            "overall": self.overall,
            "per_domain": dict(sorted(self.per_domain.items())),
            "per_category": dict(sorted(self.per_category.items())),
            "histogram": list(self.histogram),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            return cls(float(d["threshold"]), int(d["n"]), float(d["overall"]),
                       {str(k): float(v) for k, v in d["per_domain"].items()},
                       {str(k): float(v) for k, v in d["per_category"].items()},
                       [int(c) for c in d["histogram"]])
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise DataFormatError(f"malformed report: {exc}") from exc


def _check_threshold(threshold: float) -> float:
    threshold = float(threshold)
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie strictly in (0, 1), got {threshold}")
    return threshold


def accuracy_at(items: Sequence[EvalItem], threshold: float,
                table: np.ndarray) -> float:
    """Fraction of items whose score strictly exceeds the threshold."""
    threshold = _check_threshold(threshold)
    if not items:
        raise DegenerateError("accuracy over zero items is undefined")
    hits = sum(1 for it in items
               if semantic_score(it.prediction, it.reference, table) > threshold)
    return hits / len(items)


def build_report(items: Sequence[EvalItem], threshold: float,
                 table: np.ndarray) -> EvalReport:
    threshold = _check_threshold(threshold)
    if not items:
        raise DegenerateError("cannot report on zero items")
    scores = [semantic_score(it.prediction, it.reference, table) for it in items]
    hits = [s > threshold for s in scores]
    overall = sum(hits) / len(items)

    def group_accuracy(key: Callable[[EvalItem], str]) -> Dict[str, float]:
        totals: Dict[str, int] = {}
        wins: Dict[str, int] = {}
        for it, hit in zip(items, hits):
            k = key(it)
            totals[k] = totals.get(k, 0) + 1
            wins[k] = wins.get(k, 0) + int(hit)
        accs = {k: wins[k] / totals[k] for k in totals}
        # Group accuracies must recombine to the overall number.
        back = sum(accs[k] * totals[k] for k in totals) / len(items)
        if abs(back - overall) > 1e-12:
            raise ContractError("per-group accuracies do not recombine")
        return accs

    histogram = [0] * N_HIST_BINS
    for s in scores:
        histogram[min(int(s * N_HIST_BINS), N_HIST_BINS - 1)] += 1

    return EvalReport(threshold, len(items), overall,
                      group_accuracy(lambda it: it.domain),
                      group_accuracy(lambda it: it.category),
                      histogram)


def predict_answer(model: Model, sv: corpus.SubVideo, qa: corpus.QAPair,
                   modality: str = "both", max_new: int = 4) -> List[int]:
    ctx = contexts.qa_context(model, sv, qa.q, modality)
    return model.generate_greedy(ctx, max_new=max_new)


AnswerFn = Callable[[Model, corpus.SubVideo, corpus.QAPair, str], List[int]]


def evaluate_model(model: Model, subvideos: Sequence[corpus.SubVideo],
                   threshold: float = DEFAULT_THRESHOLD,
                   modality: str = "both",
                   table: Optional[np.ndarray] = None,
                   answer_fn: Optional[AnswerFn] = None,
                   answerability: Optional[str] = None) -> EvalReport:
    """Run every manifest question through the model and score it.

    ``answerability`` optionally restricts scoring to questions with
    that tag. ``answer_fn`` substitutes the prediction step, for
    metric plumbing tests.
    """
    contexts.check_modality(modality)
    threshold = _check_threshold(threshold)
    if table is None:
        table = metric_table(model.config.vocab_size)
    top = model.config.vocab_size
    for sv in subvideos:
        ids = [t for p in sv.qa for t in p.q + p.a]
        if any(t >= top for t in ids):
            raise ConfigError(f"{sv.id}: token id outside model vocabulary")
    if answer_fn is None:
        answer_fn = predict_answer
    items: List[EvalItem] = []
    for sv in subvideos:
        for qa in sv.qa:
            if answerability is not None and qa.answerability != answerability:
                continue
            pred = [int(t) for t in answer_fn(model, sv, qa, modality)]
            items.append(EvalItem(sv.id, sv.domain, qa.category,
                                  qa.answerability, list(qa.a), pred))
    if not items:
        raise DegenerateError("no questions matched the evaluation filters")
    return build_report(items, threshold, table)


def render_ablation_table(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """Fixed-width comparison table: one row per variant, category columns.

    Categories are unioned across the reports so partially trained
    variants with missing categories still render (as a dash).
    """
    if not rows:
        raise ContractError("render_ablation_table needs at least one row")
    cats = sorted({c for _, rep in rows for c in rep.per_category})
    width = max(len(name) for name, _ in rows)
    width = max(width, len("variant")) + 2
    header = f"{'variant':<{width}}" + "".join(f"{c:>22}" for c in cats) + f"{'total':>10}"
    lines = [header, "-" * len(header)]
    for name, rep in rows:
        cells = "".join(
            f"{rep.per_category[c]:>22.4f}" if c in rep.per_category else f"{'-':>22}"
            for c in cats)
        lines.append(f"{name:<{width}}" + cells + f"{rep.overall:>10.4f}")
    return "\n".join(lines)


def render_report(report: EvalReport) -> str:
    """Fixed-width text table for terminal reading."""
    lines = []
    lines.append(f"{'group':<34}{'accuracy':>10}")
    lines.append("-" * 44)
    lines.append(f"{'overall (n=%d, t=%.2f)' % (report.n, report.threshold):<34}"
                 f"{report.overall:>10.4f}")
    for name in sorted(report.per_domain):
        lines.append(f"{'domain/' + name:<34}{report.per_domain[name]:>10.4f}")
    for name in sorted(report.per_category):
        lines.append(f"{'category/' + name:<34}{report.per_category[name]:>10.4f}")
    lo = 0.0
    step = 1.0 / N_HIST_BINS
    for i, count in enumerate(report.histogram):
        lines.append(f"{'score [%.2f, %.2f%s' % (lo, lo + step, ')' if i < N_HIST_BINS - 1 else ']'):<34}{count:>10d}")
        lo += step
    return "\n".join(lines)
