"""Note-level positive-class scoring of detections against gold labels.

Precision/recall/F1 are computed per category with explicit N/A semantics
on zero division; macro averages skip N/A rows by default (an optional
zero-imputation mode exists for sensitivity analysis).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .corpus import GoldLabel
from .extract import Detection
from .taxonomy import category_ids, taxonomy


class DuplicateDetectionError(ValueError):
    pass


@dataclass(frozen=True)
class CategoryScore:
    category_id: str
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float | None  # None encodes N/A (zero division)
    recall: float | None
    f1: float | None


@dataclass(frozen=True)
class EvalReport:
    backend_id: str
    rows: tuple[CategoryScore, ...]
    macro_precision: float | None
    macro_recall: float | None
    macro_f1: float | None
    n_excluded_backend_errors: int


def _metrics(tp: int, fp: int, fn: int) -> tuple[float | None, float | None, float | None]:
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None or precision + recall == 0:
        f1 = None
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def score_category(category_id: str, tp: int, fp: int, fn: int, tn: int) -> CategoryScore:
    p, r, f1 = _metrics(tp, fp, fn)
    return CategoryScore(category_id, tp, fp, fn, tn, p, r, f1)


def macro_average(
    rows: list[CategoryScore] | tuple[CategoryScore, ...], na_as_zero: bool = False
) -> tuple[float | None, float | None, float | None]:
    """Arithmetic mean per metric over rows where the metric is defined;
    N/A if every row is N/A (or zero-imputed when na_as_zero)."""

    def avg(values: list[float | None]) -> float | None:
        if na_as_zero:
            values = [0.0 if v is None else v for v in values]
        defined = [v for v in values if v is not None]
        return sum(defined) / len(defined) if defined else None

    return (
        avg([r.precision for r in rows]),
        avg([r.recall for r in rows]),
        avg([r.f1 for r in rows]),
    )


def score(
    gold: list[GoldLabel],
    detections: list[Detection],
    na_as_zero: bool = False,
) -> EvalReport:
    """Per-category counts over the intersection of gold-labeled and detected
    pairs; backend_error detections are excluded from denominators."""
    backend_id = detections[0].backend_id if detections else ""
    det_map: dict[tuple[str, str], Detection] = {}
    for d in detections:
        key = (d.note_id, d.category_id)
        if key in det_map:
            raise DuplicateDetectionError(f"duplicate detection for pair {key}")
        det_map[key] = d

    counts = {cid: [0, 0, 0, 0] for cid in category_ids()}  # tp, fp, fn, tn
    n_excluded = 0
    for g in gold:
        d = det_map.get((g.note_id, g.category_id))
        if d is None or g.category_id not in counts:
            continue
        if d.status == "backend_error":
            n_excluded += 1
            continue
        c = counts[g.category_id]
        if d.present and g.present:
            c[0] += 1
        elif d.present and not g.present:
            c[1] += 1
        elif not d.present and g.present:
            c[2] += 1
        else:
            c[3] += 1

    rows = tuple(score_category(cid, *counts[cid]) for cid in category_ids())
    mp, mr, mf = macro_average(rows, na_as_zero=na_as_zero)
    return EvalReport(
        backend_id=backend_id,
        rows=rows,
        macro_precision=mp,
        macro_recall=mr,
        macro_f1=mf,
        n_excluded_backend_errors=n_excluded,
    )


# ---------------------------------------------------------------------------
# Rendering

def _fmt(v: float | None, places: int = 2) -> str:
    return "N/A" if v is None else f"{v:.{places}f}"


def render_report(report: EvalReport, format: str = "table") -> str:
    if format not in ("table", "jsonl", "markdown"):
        raise ValueError(f"unknown format {format!r}")
    names = {c.category_id: c.display_name for c in taxonomy()}
    if format == "jsonl":
        lines = []
        for r in report.rows:
            lines.append(
                json.dumps(
                    {
                        "category_id": r.category_id,
                        "tp": r.tp, "fp": r.fp, "fn": r.fn, "tn": r.tn,
                        "precision": r.precision, "recall": r.recall, "f1": r.f1,
                    }
                )
            )
        lines.append(
            json.dumps(
                {
                    "category_id": "__macro__",
                    "precision": report.macro_precision,
                    "recall": report.macro_recall,
                    "f1": report.macro_f1,
                    "n_excluded_backend_errors": report.n_excluded_backend_errors,
                }
            )
        )
        return "".join(line + "\n" for line in lines)

    header = ("Category", "Precision", "Recall", "F1")
    body = [
        (names.get(r.category_id, r.category_id), _fmt(r.precision), _fmt(r.recall), _fmt(r.f1))
        for r in report.rows
    ]
    body.append(
        ("Average", _fmt(report.macro_precision), _fmt(report.macro_recall), _fmt(report.macro_f1))
    )
    if format == "markdown":
        out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        out += ["| " + " | ".join(row) + " |" for row in body]
        return "\n".join(out) + "\n"
    width0 = max(len(row[0]) for row in [header] + body)
    out = [f"{header[0]:<{width0}}  {header[1]:>9}  {header[2]:>9}  {header[3]:>9}"]
    for i, row in enumerate(body):
        if i == len(body) - 1:
            out.append("-" * (width0 + 33))
        out.append(f"{row[0]:<{width0}}  {row[1]:>9}  {row[2]:>9}  {row[3]:>9}")
    if report.n_excluded_backend_errors:
        out.append(f"(excluded backend errors: {report.n_excluded_backend_errors})")
    return "\n".join(out) + "\n"
