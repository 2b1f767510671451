"""Fine-grained TP / TN / AC indicators and multi-trial averaging.

Values are exact :class:`fractions.Fraction` objects so that reports can be
compared for equality; a cell whose denominator is zero is undefined (None).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .labels import TYPES, Annotation

INDICATORS = ("tp", "tn", "ac")
BLOCKS = tuple(t.value for t in TYPES) + ("sum",)


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    id: int
    pred: Annotation
    truth: Annotation


@dataclass(frozen=True)
class ImageFlags:
    tp: bool | None
    tn: bool | None
    ac: bool


@dataclass(frozen=True)
class Cell:
    value: Fraction | None
    denominator: int

    @property
    def defined(self) -> bool:
        return self.value is not None


class MetricsReport:
    """Indicator cells keyed by block (a type name or ``"sum"``) and indicator."""

    def __init__(self, cells: dict[tuple[str, str], Cell]) -> None:
        self.cells = cells

    def __getitem__(self, key: tuple[str, str]) -> Fraction | None:
        return self.cells[key].value

    def cell(self, block: str, indicator: str) -> Cell:
        return self.cells[(block, indicator)]

    def defined_mask(self) -> dict[tuple[str, str], bool]:
        return {k: c.defined for k, c in self.cells.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, MetricsReport) and self.cells == other.cells

    def to_json(self) -> dict:
        doc = {}
        for block in BLOCKS:
            entry = {}
            for ind in INDICATORS:
                c = self.cells[(block, ind)]
                entry[ind] = None if c.value is None else float(c.value)
                entry[f"{ind}_den"] = c.denominator
            doc[block] = entry
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        cells = {}
        for block in BLOCKS:
            for ind in INDICATORS:
                v = doc[block][ind]
                cells[(block, ind)] = Cell(
                    None if v is None else Fraction(v), doc[block][f"{ind}_den"]
                )
        return cls(cells)

    def summary(self) -> str:
        def fmt(v):
            return "  -  " if v is None else f"{float(v):.3f}"

        rows = [f"{'':12s}" + "".join(f"{i.upper():>7s}" for i in INDICATORS)]
        for block in BLOCKS:
            rows.append(f"{block:12s}" + "".join(f"{fmt(self[block, i]):>7s}" for i in INDICATORS))
        return "\n".join(rows)

    def __repr__(self) -> str:
        return f"MetricsReport({self.to_json()})"


def image_flags(y: Annotation, y_hat: Annotation) -> ImageFlags:
    performed = [(t, p) for t, p in zip(y.levels, y_hat.levels) if t != 0]
    skipped = [(t, p) for t, p in zip(y.levels, y_hat.levels) if t == 0]
    tp = all(p != 0 for _, p in performed) if performed else None
    tn = all(p == 0 for _, p in skipped) if skipped else None
    return ImageFlags(tp=tp, tn=tn, ac=y.levels == y_hat.levels)


def _ratio(num: int, den: int) -> Cell:
    return Cell(Fraction(num, den) if den else None, den)


def aggregate(records: Iterable[PredictionRecord]) -> MetricsReport:
    records = list(records)
    if not records:
        raise AggregationError("aggregate needs at least one record")
    cells: dict[tuple[str, str], Cell] = {}
    for k, t in enumerate(TYPES):
        on = [r for r in records if r.truth.levels[k] != 0]
        off = [r for r in records if r.truth.levels[k] == 0]
        cells[(t.value, "tp")] = _ratio(sum(r.pred.levels[k] != 0 for r in on), len(on))
        cells[(t.value, "tn")] = _ratio(sum(r.pred.levels[k] == 0 for r in off), len(off))
        cells[(t.value, "ac")] = _ratio(
            sum(r.pred.levels[k] == r.truth.levels[k] for r in records), len(records)
        )
    flags = [image_flags(r.truth, r.pred) for r in records]
    for ind in ("tp", "tn"):
        defined = [getattr(f, ind) for f in flags if getattr(f, ind) is not None]
        cells[("sum", ind)] = _ratio(sum(defined), len(defined))
    cells[("sum", "ac")] = _ratio(sum(f.ac for f in flags), len(flags))
    return MetricsReport(cells)


def average_trials(reports: Sequence[MetricsReport], expected: int | None = 5) -> MetricsReport:
    """Per-cell arithmetic mean over trials; undefined cells stay undefined.

    Denominators of the averaged report are the per-trial denominators summed.
    """
    if not reports:
        raise AggregationError("no reports to average")
    if expected is not None and len(reports) != expected:
        raise AggregationError(f"expected {expected} trial reports, got {len(reports)}")
    mask = reports[0].defined_mask()
    for i, rep in enumerate(reports[1:], start=2):
        if rep.defined_mask() != mask:
            raise AggregationError(f"trial {i} defines different cells than trial 1")
    cells = {}
    for key, defined in mask.items():
        den = sum(r.cells[key].denominator for r in reports)
        if defined:
            cells[key] = Cell(sum((r[key] for r in reports), Fraction(0)) / len(reports), den)
        else:
            cells[key] = Cell(None, den)
    return MetricsReport(cells)


def tp_spread(reports: Sequence[MetricsReport]) -> float:
    """Max minus min of summed TP across trials."""
    vals = [float(r["sum", "tp"]) for r in reports if r["sum", "tp"] is not None]
    return max(vals) - min(vals) if vals else 0.0


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(
                    PredictionRecord(
                        int(row["id"]),
                        Annotation.from_levels(row["pred"]),
                        Annotation.from_levels(row["truth"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise AggregationError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_predictions(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {"id": r.id, "pred": list(r.pred.levels), "truth": list(r.truth.levels)}
            fh.write(json.dumps(row) + "\n")


def write_report(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
