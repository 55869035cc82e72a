"""Weighted per-token voting over multiple classifiers' BIO streams.

Every classifier votes with its weight for the label it predicted at a
token. The best-scored label wins if its score reaches the threshold,
otherwise the token is O. Voting happens at token level because that is
the only granularity at which the classifiers' span outputs align; spans
are re-encoded over a shared tokenization and the winning labels are
decoded back with the BIO repair rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

from . import DataError
from .ingest import AnnotatedDocument, decode_bio, encode_bio, sentences_of

WEIGHT_RANGE = (0.5, 3.0)
THRESHOLD_RANGE = (1.0, 5.0)


@dataclass
class EnsembleConfig:
    weights: list[float]
    threshold: float
    # ">=" accepts a score equal to the threshold; the strict variant is ">".
    comparison: str = ">="

    def __post_init__(self):
        lo, hi = WEIGHT_RANGE
        for w in self.weights:
            if not (lo <= w <= hi):
                raise ValueError(f"classifier weight {w} outside [{lo},{hi}]")
        tlo, thi = THRESHOLD_RANGE
        if not (tlo <= self.threshold <= thi):
            raise ValueError(f"threshold {self.threshold} outside [{tlo},{thi}]")
        if self.comparison not in (">=", ">"):
            raise ValueError(f"comparison must be '>=' or '>', got {self.comparison!r}")

    def accepts(self, score: float) -> bool:
        return score >= self.threshold if self.comparison == ">=" else score > self.threshold


# The weights and threshold selected on the shared task development set.
PAPER_ENSEMBLE = (0.5, 2.0, 2.5, 0.5, 3.0)


def paper_config() -> EnsembleConfig:
    return EnsembleConfig(weights=list(PAPER_ENSEMBLE[:4]), threshold=PAPER_ENSEMBLE[4])


def vote(predictions: list[str], config: EnsembleConfig, label_order: dict[str, int] | None = None) -> str:
    """Combine one token's labels; ties break toward the lowest label index.

    ``label_order`` maps labels to inventory indices; without it, ties
    break alphabetically with O first.
    """
    if len(predictions) != len(config.weights):
        raise DataError(f"{len(predictions)} predictions for {len(config.weights)} weights")
    scores: dict[str, float] = {}
    for label, w in zip(predictions, config.weights):
        scores[label] = scores.get(label, 0.0) + w

    def order(label: str) -> tuple:
        if label_order is not None:
            return (label_order.get(label, len(label_order)), label)
        return (label != "O", label)

    best = min(scores, key=lambda lab: (-scores[lab], order(lab)))
    if best == "O" or not config.accepts(scores[best]):
        return "O"
    return best


def ensemble_documents(
    docs: list[AnnotatedDocument],
    config: EnsembleConfig,
    label_order: dict[str, int] | None = None,
    doc_id: str | None = None,
) -> AnnotatedDocument:
    """Vote per token across classifiers' outputs for one shared text."""
    if len(docs) < 1:
        raise DataError("ensemble needs at least one classifier output")
    text = docs[0].text
    for d in docs[1:]:
        if d.text != text:
            raise DataError(f"classifier outputs disagree on text for {d.doc_id}")
    spans = []
    for sent in sentences_of(text):
        streams = [encode_bio(sent, d.spans) for d in docs]
        labels = [vote([s[i] for s in streams], config, label_order) for i in range(len(sent.tokens))]
        spans.extend(decode_bio(sent, labels, text))
    return AnnotatedDocument(doc_id=doc_id or docs[0].doc_id, text=text, spans=sorted(spans))


def ensemble_corpus(
    per_classifier: list[list[AnnotatedDocument]],
    config: EnsembleConfig,
    label_order: dict[str, int] | None = None,
) -> list[AnnotatedDocument]:
    """Apply :func:`ensemble_documents` document by document."""
    if not per_classifier:
        raise DataError("no classifier outputs given")
    by_id = [{d.doc_id: d for d in docs} for docs in per_classifier]
    ids = set(by_id[0])
    for m in by_id[1:]:
        if set(m) != ids:
            raise DataError("classifier outputs cover different document sets")
    return [
        ensemble_documents([m[i] for m in by_id], config, label_order, doc_id=i) for i in sorted(ids)
    ]


@dataclass
class GridSpec:
    weight_step: float = 0.5
    threshold_step: float = 1.0

    def weight_values(self) -> list[float]:
        lo, hi = WEIGHT_RANGE
        n = int(round((hi - lo) / self.weight_step))
        return [round(lo + i * self.weight_step, 10) for i in range(n + 1)]

    def threshold_values(self) -> list[float]:
        lo, hi = THRESHOLD_RANGE
        n = int(round((hi - lo) / self.threshold_step))
        return [round(lo + i * self.threshold_step, 10) for i in range(n + 1)]


def tune_weights(
    per_classifier: list[list[AnnotatedDocument]],
    gold: list[AnnotatedDocument],
    grid: GridSpec | None = None,
) -> EnsembleConfig:
    """Exhaustive grid search maximizing dev strict micro-F1.

    Ties keep the first configuration in lexicographic grid order
    (weights sweep before threshold).
    """
    from .evaluation import evaluate_ner

    if len(per_classifier) < 2:
        raise DataError("weight tuning needs at least two classifiers")
    if not gold:
        raise DataError("weight tuning needs a non-empty development set")
    grid = grid or GridSpec()
    best: tuple[float, EnsembleConfig] | None = None
    for weights in product(grid.weight_values(), repeat=len(per_classifier)):
        for t in grid.threshold_values():
            config = EnsembleConfig(weights=list(weights), threshold=t)
            pred = ensemble_corpus(per_classifier, config)
            f1 = evaluate_ner(gold, pred).micro.f1
            if best is None or f1 > best[0]:
                best = (f1, config)
    return best[1]
