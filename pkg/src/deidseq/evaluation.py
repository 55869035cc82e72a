"""Span-level evaluation in the shared-task regimes.

Task 1: strict per-class matching (offsets and label must both match),
with a leak score. Task 2: binary detection, strict offsets or "merged"
offsets where runs of spans separated only by whitespace/punctuation are
fused before comparison. Plus token-level confusion matrices and region
filtering for evaluating on real-text intervals only.

Conventions, stated in every report: precision is 0 when nothing was
predicted, recall is 0 when there is no gold, F1 is 0 when P+R is 0.
Leak is the fraction of all tokens that are gold-sensitive yet not
covered by any predicted span (the official formula is unpublished; this
one is documented and is not numerically comparable to the shared task).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import DataError
from .ingest import AnnotatedDocument, PhiSpan, tokenize

CONVENTIONS = "P=0 if no predictions, R=0 if no gold, F1=0 if P+R=0; leak = uncovered gold tokens / all tokens"

RegionMask = dict[str, list[tuple[int, int]]]


@dataclass
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class EvalReport:
    task: str
    per_class: dict[str, ClassScore]
    micro: ClassScore
    gold_spans: int
    pred_spans: int
    leak: float | None = None
    token_count: int | None = None
    token_true_negatives: int | None = None
    notes: str = CONVENTIONS

    def format_table(self) -> str:
        lines = [f"== {self.task} ==", f"{'class':<34}{'TP':>6}{'FP':>6}{'FN':>6}{'P':>9}{'R':>9}{'F1':>9}"]
        for name in sorted(self.per_class):
            s = self.per_class[name]
            lines.append(
                f"{name:<34}{s.tp:>6}{s.fp:>6}{s.fn:>6}{s.precision:>9.4f}{s.recall:>9.4f}{s.f1:>9.4f}"
            )
        m = self.micro
        lines.append(f"{'micro':<34}{m.tp:>6}{m.fp:>6}{m.fn:>6}{m.precision:>9.4f}{m.recall:>9.4f}{m.f1:>9.4f}")
        if self.leak is not None:
            lines.append(f"leak = {self.leak:.5f} over {self.token_count} tokens")
        lines.append(f"# {self.notes}")
        return "\n".join(lines)

    def to_keyvalues(self) -> str:
        """One metric per line: documented machine-readable form."""
        kv: list[tuple[str, object]] = [
            ("task", self.task),
            ("gold_spans", self.gold_spans),
            ("pred_spans", self.pred_spans),
            ("micro_tp", self.micro.tp),
            ("micro_fp", self.micro.fp),
            ("micro_fn", self.micro.fn),
            ("micro_precision", f"{self.micro.precision:.6f}"),
            ("micro_recall", f"{self.micro.recall:.6f}"),
            ("micro_f1", f"{self.micro.f1:.6f}"),
        ]
        if self.leak is not None:
            kv.append(("leak", f"{self.leak:.6f}"))
            kv.append(("token_count", self.token_count))
            kv.append(("token_true_negatives", self.token_true_negatives))
        for name in sorted(self.per_class):
            s = self.per_class[name]
            kv.extend(
                [
                    (f"class.{name}.tp", s.tp),
                    (f"class.{name}.fp", s.fp),
                    (f"class.{name}.fn", s.fn),
                    (f"class.{name}.precision", f"{s.precision:.6f}"),
                    (f"class.{name}.recall", f"{s.recall:.6f}"),
                    (f"class.{name}.f1", f"{s.f1:.6f}"),
                ]
            )
        return "\n".join(f"{k}\t{v}" for k, v in kv) + "\n"


def _paired(gold: list[AnnotatedDocument], pred: list[AnnotatedDocument]):
    g = {d.doc_id: d for d in gold}
    p = {d.doc_id: d for d in pred}
    if set(g) != set(p):
        missing = sorted(set(g) ^ set(p))
        raise DataError(f"gold and prediction document sets differ, e.g. {missing[:5]}")
    pairs = []
    for doc_id in sorted(g):
        if g[doc_id].text != p[doc_id].text:
            raise DataError(f"document {doc_id}: gold and prediction texts differ")
        pairs.append((g[doc_id], p[doc_id]))
    return pairs


def _covered(tokens, spans: list[PhiSpan]) -> np.ndarray:
    out = np.zeros(len(tokens), dtype=bool)
    for s in spans:
        for i, t in enumerate(tokens):
            if t.start < s.end and t.end > s.start:
                out[i] = True
    return out


def _token_stats(pairs) -> tuple[int, int, int]:
    """(total tokens, uncovered gold-sensitive tokens, tokens outside both)."""
    total = leaked = tn = 0
    for g, p in pairs:
        tokens = tokenize(g.text)
        total += len(tokens)
        in_gold = _covered(tokens, g.spans)
        in_pred = _covered(tokens, p.spans)
        leaked += int(np.sum(in_gold & ~in_pred))
        tn += int(np.sum(~in_gold & ~in_pred))
    return total, leaked, tn


def evaluate_ner(gold: list[AnnotatedDocument], pred: list[AnnotatedDocument]) -> EvalReport:
    """Task 1: a prediction counts only with exactly matching (start, end, label)."""
    pairs = _paired(gold, pred)
    per_class: dict[str, ClassScore] = {}
    micro = ClassScore()
    for g, p in pairs:
        gold_set = {(s.start, s.end, s.label) for s in g.spans}
        pred_set = {(s.start, s.end, s.label) for s in p.spans}
        for cls in {s.label for s in [*g.spans, *p.spans]}:
            score = per_class.setdefault(cls, ClassScore())
            gc = {x for x in gold_set if x[2] == cls}
            pc = {x for x in pred_set if x[2] == cls}
            tp = len(gc & pc)
            score.tp += tp
            score.fn += len(gc) - tp
            score.fp += len(pc) - tp
    micro.tp = sum(s.tp for s in per_class.values())
    micro.fp = sum(s.fp for s in per_class.values())
    micro.fn = sum(s.fn for s in per_class.values())
    total, leaked, tn = _token_stats(pairs)
    return EvalReport(
        task="task1-ner-strict",
        per_class=per_class,
        micro=micro,
        gold_spans=micro.tp + micro.fn,
        pred_spans=micro.tp + micro.fp,
        leak=(leaked / total) if total else 0.0,
        token_count=total,
        token_true_negatives=tn,
    )


def _binary_report(pairs, task: str, intervals_of) -> EvalReport:
    micro = ClassScore()
    for g, p in pairs:
        gold_set = set(intervals_of(g))
        pred_set = set(intervals_of(p))
        tp = len(gold_set & pred_set)
        micro.tp += tp
        micro.fn += len(gold_set) - tp
        micro.fp += len(pred_set) - tp
    return EvalReport(
        task=task,
        per_class={"PHI": ClassScore(micro.tp, micro.fp, micro.fn)},
        micro=micro,
        gold_spans=micro.tp + micro.fn,
        pred_spans=micro.tp + micro.fp,
    )


def evaluate_binary_strict(gold: list[AnnotatedDocument], pred: list[AnnotatedDocument]) -> EvalReport:
    """Task 2 strict: labels erased, exact (start, end) matching."""
    return _binary_report(
        _paired(gold, pred), "task2-binary-strict", lambda d: [(s.start, s.end) for s in d.spans]
    )


def merge_adjacent(doc: AnnotatedDocument) -> list[tuple[int, int]]:
    """Fuse spans separated only by whitespace/punctuation into maximal intervals."""
    merged: list[list[int]] = []
    for s in sorted(doc.spans):
        if merged:
            gap = doc.text[merged[-1][1] : s.start]
            if all(not ch.isalnum() for ch in gap):
                merged[-1][1] = max(merged[-1][1], s.end)
                continue
        merged.append([s.start, s.end])
    return [(a, b) for a, b in merged]


def evaluate_binary_merged(gold: list[AnnotatedDocument], pred: list[AnnotatedDocument]) -> EvalReport:
    """Task 2 merged: adjacency-fused intervals, then strict offset matching."""
    return _binary_report(_paired(gold, pred), "task2-binary-merged", merge_adjacent)


def leak_score(
    gold: list[AnnotatedDocument], pred: list[AnnotatedDocument], token_count: int | None = None
) -> float:
    """Uncovered gold-sensitive tokens divided by the total token count."""
    pairs = _paired(gold, pred)
    total, leaked, _ = _token_stats(pairs)
    denom = total if token_count is None else token_count
    if denom <= 0:
        raise DataError("leak_score: token count must be positive")
    return leaked / denom


# ---------------------------------------------------------------------------
# Confusion matrix


@dataclass
class ConfusionMatrix:
    classes: list[str]  # includes "O" last
    counts: np.ndarray  # rows = gold, columns = predicted

    def row_sums(self) -> dict[str, int]:
        return {c: int(self.counts[i].sum()) for i, c in enumerate(self.classes)}

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["gold\\pred", *self.classes])
            for i, c in enumerate(self.classes):
                w.writerow([c, *self.counts[i].tolist()])


def confusion_matrix(
    gold: list[AnnotatedDocument], pred: list[AnnotatedDocument], classes: list[str] | None = None
) -> ConfusionMatrix:
    """Token-level gold vs predicted class counts ('O' = not covered)."""
    pairs = _paired(gold, pred)
    if classes is None:
        classes = sorted({s.label for g, p in pairs for s in [*g.spans, *p.spans]})
    names = [*classes, "O"]
    idx = {c: i for i, c in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)

    def label_of(tok, spans):
        for s in spans:
            if tok.start < s.end and tok.end > s.start:
                return s.label
        return "O"

    for g, p in pairs:
        for tok in tokenize(g.text):
            counts[idx[label_of(tok, g.spans)], idx[label_of(tok, p.spans)]] += 1
    return ConfusionMatrix(classes=names, counts=counts)


# ---------------------------------------------------------------------------
# Region filtering


@dataclass
class FilterOutcome:
    documents: list[AnnotatedDocument]
    retained: int
    dropped: int


def filter_regions(docs: list[AnnotatedDocument], mask: RegionMask) -> FilterOutcome:
    """Keep only spans fully inside a masked-in interval; straddlers are dropped.

    Apply symmetrically to gold and predictions before any evaluate_* call.
    """
    out = []
    retained = dropped = 0
    for doc in docs:
        intervals = sorted(mask.get(doc.doc_id, []))
        for (a, b) in intervals:
            if not (0 <= a < b <= len(doc.text)):
                raise DataError(f"{doc.doc_id}: region ({a},{b}) out of bounds")
        for (a, b), (c, d) in zip(intervals, intervals[1:]):
            if c < b:
                raise DataError(f"{doc.doc_id}: overlapping regions ({a},{b}) and ({c},{d})")
        kept = [s for s in doc.spans if any(a <= s.start and s.end <= b for a, b in intervals)]
        retained += len(kept)
        dropped += len(doc.spans) - len(kept)
        out.append(AnnotatedDocument(doc_id=doc.doc_id, text=doc.text, spans=kept))
    return FilterOutcome(documents=out, retained=retained, dropped=dropped)


def load_regions(path: str | Path) -> RegionMask:
    """Sidecar file: one ``doc_id<TAB>start<TAB>end`` interval per line."""
    mask: RegionMask = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 'doc_id<TAB>start<TAB>end'")
        mask.setdefault(parts[0], []).append((int(parts[1]), int(parts[2])))
    return mask


def save_regions(path: str | Path, mask: RegionMask) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc_id in sorted(mask):
            for a, b in sorted(mask[doc_id]):
                f.write(f"{doc_id}\t{a}\t{b}\n")
