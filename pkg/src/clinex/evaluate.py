"""Exact class-match span scoring (precision, recall, F1)."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

from clinex.corpus import CONCEPT_TYPES, ConceptSpan
from clinex.errors import DataError


@dataclass(frozen=True)
class Scores:
    tp: int
    fp: int
    fn: int

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

    def prf(self) -> Tuple[float, float, float]:
        return self.precision, self.recall, self.f1


@dataclass(frozen=True)
class EvalReport:
    per_class: Dict[str, Scores]
    micro: Scores
    gold_total: int
    pred_total: int


def check_no_overlap(spans: Iterable[ConceptSpan], which: str = "spans"):
    by_line = defaultdict(list)
    for s in spans:
        by_line[(s.doc_id, s.line_index)].append((s.start_token, s.end_token))
    for (doc_id, line), ranges in by_line.items():
        ranges.sort()
        for (_, prev_end), (start, _) in zip(ranges, ranges[1:]):
            if start <= prev_end:
                raise DataError(f"{which}: overlapping spans in {doc_id or 'document'} line {line}")


def evaluate(gold: Sequence[ConceptSpan], pred: Sequence[ConceptSpan]) -> EvalReport:
    """Score predictions; a hit needs doc, line, both offsets and label to agree."""
    check_no_overlap(gold, "gold")
    check_no_overlap(pred, "pred")
    gold_keys = {s.key for s in gold}
    pred_keys = {s.key for s in pred}
    hits = gold_keys & pred_keys
    labels = list(CONCEPT_TYPES)
    per_class = {}
    for label in labels:
        tp = sum(1 for k in hits if k[4] == label)
        n_gold = sum(1 for k in gold_keys if k[4] == label)
        n_pred = sum(1 for k in pred_keys if k[4] == label)
        per_class[label] = Scores(tp, n_pred - tp, n_gold - tp)
    micro = Scores(
        sum(s.tp for s in per_class.values()),
        sum(s.fp for s in per_class.values()),
        sum(s.fn for s in per_class.values()),
    )
    return EvalReport(per_class, micro, len(gold_keys), len(pred_keys))


def format_report(report: EvalReport) -> str:
    header = f"{'':<12}{'Precision':>9}  {'Recall':>6}  {'F1':>5}"
    rows = [header]
    for label, scores in report.per_class.items():
        rows.append(_row(label, scores))
    rows.append(_row("micro", report.micro))
    return "\n".join(rows) + "\n"


def _row(name: str, scores: Scores) -> str:
    p, r, f = scores.prf()
    return f"{name:<12}{p:>9.3f}  {r:.3f}  {f:.3f}"


def report_items(report: EvalReport) -> List[Tuple[str, str]]:
    items = []
    for name, scores in list(report.per_class.items()) + [("micro", report.micro)]:
        items += [
            (f"{name}.tp", str(scores.tp)),
            (f"{name}.fp", str(scores.fp)),
            (f"{name}.fn", str(scores.fn)),
            (f"{name}.precision", f"{scores.precision:.6f}"),
            (f"{name}.recall", f"{scores.recall:.6f}"),
            (f"{name}.f1", f"{scores.f1:.6f}"),
        ]
    items += [("gold_total", str(report.gold_total)), ("pred_total", str(report.pred_total))]
    return items


def format_key_values(report: EvalReport) -> str:
    return "".join(f"{k} = {v}\n" for k, v in report_items(report))
