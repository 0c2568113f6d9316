"""Answer accuracy, unseen-template counts and accuracy by equation size."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .dataio import ProblemRecord, answers_match
from .exprtree import ExprTree, leaf_names, to_infix, to_template

DEFAULT_TOL = 1e-4


def answer_accuracy(predictions: Sequence[Optional[float]], golds: Sequence[Optional[float]],
                    tolerance: float = DEFAULT_TOL) -> float:
    """Fraction of predictions within ``max(tol, tol·|gold|)``; ``None`` counts as wrong."""
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} gold answers")
    if not golds:
        return 0.0
    hits = sum(answers_match(p, g, tolerance) for p, g in zip(predictions, golds))
    return hits / len(golds)


def count_unseen_templates(predicted_trees: Iterable[Optional[ExprTree]], train_templates: set) -> int:
    """Number of samples (not distinct templates) whose prediction has an unseen template."""
    return sum(1 for tree in predicted_trees if tree is not None and to_template(tree) not in train_templates)


def accuracy_by_complexity(predictions: Sequence[Optional[float]], golds: Sequence[ProblemRecord],
                           tolerance: float = DEFAULT_TOL) -> dict[int, tuple[int, float]]:
    """``{op count: (n, accuracy)}`` bucketed by the gold tree's operator count."""
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} records")
    buckets: dict[int, list[bool]] = {}
    for pred, rec in zip(predictions, golds):
        if rec.gold_tree is None:
            raise ValueError(f"record {rec.id} has no gold tree")
        buckets.setdefault(rec.gold_tree.op_count, []).append(answers_match(pred, rec.gold_answer, tolerance))
    return {k: (len(v), sum(v) / len(v)) for k, v in sorted(buckets.items())}


@dataclass
class RecordResult:
    id: str
    equation: Optional[str]
    answer: Optional[float]
    correct: bool
    template: Optional[str]
    template_seen: Optional[bool]


@dataclass
class EvalReport:
    answer_accuracy: float
    n_total: int
    n_correct: int
    n_decode_failures: int
    unseen_template_count: int
    accuracy_by_op_count: dict[int, tuple[int, float]]
    per_record: list[RecordResult] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["accuracy_by_op_count"] = {str(k): {"n": n, "accuracy": acc}
                                       for k, (n, acc) in self.accuracy_by_op_count.items()}
        return out

    def table(self) -> str:
        lines = [
            f"answer accuracy   {self.answer_accuracy:.4f}  ({self.n_correct}/{self.n_total})",
            f"decode failures   {self.n_decode_failures}",
            f"unseen templates  {self.unseen_template_count}",
            "",
            "ops      n  accuracy",
        ]
        for k, (n, acc) in self.accuracy_by_op_count.items():
            lines.append(f"{k:>3}  {n:>5}  {acc:8.4f}")
        return "\n".join(lines)


def build_report(records: Sequence[ProblemRecord], trees: Sequence[Optional[ExprTree]],
                 answers: Sequence[Optional[float]], train_templates: Optional[set] = None,
                 tolerance: float = DEFAULT_TOL) -> EvalReport:
    if not (len(records) == len(trees) == len(answers)):
        raise ValueError("records, trees and answers must be aligned")
    per = []
    for rec, tree, ans in zip(records, trees, answers):
        template = None if tree is None else to_template(tree)
        seen = None if template is None or train_templates is None else template in train_templates
        equation = None
        if tree is not None:
            equation = "x=" + to_infix(tree, leaf_names(len(rec.numbers), rec.leaf_arity))
        per.append(RecordResult(rec.id, equation, ans, answers_match(ans, rec.gold_answer, tolerance),
                                template, seen))
    n_correct = sum(r.correct for r in per)
    unseen = count_unseen_templates(trees, train_templates) if train_templates is not None else 0
    with_gold = [(a, r) for a, r in zip(answers, records) if r.gold_tree is not None]
    by_ops = accuracy_by_complexity([a for a, _ in with_gold], [r for _, r in with_gold], tolerance)
    return EvalReport(
        answer_accuracy=n_correct / len(per) if per else 0.0,
        n_total=len(per),
        n_correct=n_correct,
        n_decode_failures=sum(t is None for t in trees),
        unseen_template_count=unseen,
        accuracy_by_op_count=by_ops,
        per_record=per,
    )


def evaluate_model(model, records: Sequence[ProblemRecord], tolerance: float = DEFAULT_TOL,
                   workers: int = 1) -> EvalReport:
    from .engine import decode_all

    results = decode_all(records, model, workers)
    templates = set(model.train_templates) if model.train_templates else None
    return build_report(records, [r.tree for r in results], [r.answer for r in results], templates, tolerance)


def complexity_svg(by_ops: dict[int, tuple[int, float]], width: int = 360, height: int = 220) -> str:
    """Bar chart of accuracy per operator count."""
    pad, top = 40, 20
    plot_h = height - pad - top
    n = max(len(by_ops), 1)
    slot = (width - 2 * pad) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<line x1="{pad}" y1="{top + plot_h}" x2="{width - pad}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{pad}" y1="{top}" x2="{pad}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="{pad - 6}" y="{top + 4}" text-anchor="end">1.0</text>',
        f'<text x="{pad - 6}" y="{top + plot_h}" text-anchor="end">0</text>',
    ]
    for i, (ops, (count, acc)) in enumerate(by_ops.items()):
        bar_h = acc * plot_h
        x = pad + i * slot + slot * 0.2
        parts.append(f'<rect x="{x:.1f}" y="{top + plot_h - bar_h:.1f}" width="{slot * 0.6:.1f}" '
                     f'height="{bar_h:.1f}" fill="steelblue"/>')
        parts.append(f'<text x="{x + slot * 0.3:.1f}" y="{top + plot_h + 14}" text-anchor="middle">{ops} op</text>')
        parts.append(f'<text x="{x + slot * 0.3:.1f}" y="{top + plot_h - bar_h - 4:.1f}" '
                     f'text-anchor="middle">{acc:.2f} (n={count})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(report: EvalReport, path) -> list[Path]:
    """JSON report at ``path`` plus ``.txt`` table and ``.svg`` chart beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    table = path.with_suffix(".txt")
    table.write_text(report.table() + "\n")
    chart = path.with_suffix(".svg")
    chart.write_text(complexity_svg(report.accuracy_by_op_count))
    return [path, table, chart]
