"""Grounding and change-detection metrics.

Covers box IoU, the per-sample matching protocol, the 3x4 confusion matrix
(the fourth column holds predictions whose change label could not be
recovered), per-class precision/recall/F1, IoU hit rates and the
per-anatomy accuracy table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import SampleIdMismatch
from .grammar import (
    LABELS,
    UNKNOWN_CHANGE,
    BoundingBox,
    ChangeLabel,
    GroundedFinding,
    Lexicon,
    TemporalReport,
    extract_change_label,
)

__all__ = [
    "AnatomyRow",
    "ClassMetrics",
    "ConfusionMatrix3",
    "GroundingStats",
    "PerClass",
    "SampleScore",
    "confusion",
    "grounding_stats",
    "iou",
    "per_anatomy_accuracy",
    "per_class_metrics",
    "score_sample",
    "select_finding",
]

UNKNOWN = "unknown"
_COL = {label: k for k, label in enumerate(LABELS)}
_UNKNOWN_COL = 3


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    if a == b:
        return 1.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# ---------------------------------------------------------------------------
# per-sample scoring


@dataclass(frozen=True, slots=True)
class SampleScore:
    """Outcome of matching one prediction against its reference finding.

    ``iou`` is ``None`` when the prediction carried no usable box.
    """

    sample_id: str
    true_label: ChangeLabel
    pred_label: ChangeLabel | None
    iou: float | None
    anatomy: str
    parse_errors: int = 0

    @property
    def correct(self) -> bool:
        return self.pred_label is self.true_label


def select_finding(
    findings: Sequence[GroundedFinding], ref: GroundedFinding
) -> GroundedFinding | None:
    """Pick the predicted finding that answers ``ref``.

    Preference order: same (anatomy, finding); same anatomy; highest IoU
    with the reference box (only if positive); the first finding.
    """
    if not findings:
        return None
    if len(findings) == 1:
        return findings[0]
    for f in findings:
        if f.anatomy == ref.anatomy and f.finding == ref.finding:
            return f
    for f in findings:
        if f.anatomy == ref.anatomy:
            return f
    best, best_iou = None, 0.0
    for f in findings:
        v = iou(f.box, ref.box)
        if v > best_iou:
            best, best_iou = f, v
    return best if best is not None else findings[0]


def score_sample(
    pred: TemporalReport,
    ref: GroundedFinding,
    sample_id: str = "",
    lexicon: Lexicon | None = None,
) -> SampleScore:
    """Score one parsed prediction against its reference finding.

    With no parseable finding the label falls back to the first change cue
    anywhere in the text, and the box to the first well-formed box whose
    sentence lacked a cue.
    """
    chosen = select_finding(pred.findings, ref)
    if chosen is not None:
        label: ChangeLabel | None = chosen.change
        box: BoundingBox | None = chosen.box
    else:
        label = extract_change_label(pred.raw_text, lexicon)
        box = next(
            (i.box for i in pred.issues if i.kind == UNKNOWN_CHANGE and i.box is not None),
            None,
        )
    return SampleScore(
        sample_id=sample_id,
        true_label=ref.change,
        pred_label=label,
        iou=None if box is None else iou(box, ref.box),
        anatomy=ref.anatomy,
        parse_errors=len(pred.issues),
    )


# ---------------------------------------------------------------------------
# change classification


@dataclass
class ConfusionMatrix3:
    """Rows: true label. Columns: predicted label, then Unknown."""

    counts: list[list[int]] = field(default_factory=lambda: [[0] * 4 for _ in range(3)])

    def add(self, true: ChangeLabel, pred: ChangeLabel | None, n: int = 1) -> None:
        self.counts[_COL[true]][_UNKNOWN_COL if pred is None else _COL[pred]] += n

    def merge(self, other: "ConfusionMatrix3") -> "ConfusionMatrix3":
        return ConfusionMatrix3(
            [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(self.counts, other.counts)]
        )

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def correct(self) -> int:
        return sum(self.counts[k][k] for k in range(3))

    @property
    def accuracy(self) -> float:
        total = self.total
        return self.correct / total if total else 0.0

    def support(self, label: ChangeLabel) -> int:
        return sum(self.counts[_COL[label]])

    def to_dict(self) -> dict:
        cols = [l.value for l in LABELS] + [UNKNOWN]
        return {
            "columns": cols,
            "rows": {l.value: dict(zip(cols, self.counts[_COL[l]])) for l in LABELS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix3":
        cols = [l.value for l in LABELS] + [UNKNOWN]
        return cls([[int(d["rows"][l.value][c]) for c in cols] for l in LABELS])


def confusion(
    preds: Sequence[tuple[str, ChangeLabel | None]],
    refs: Sequence[tuple[str, ChangeLabel]],
) -> ConfusionMatrix3:
    """Build the confusion matrix from aligned ``(sample_id, label)`` sequences."""
    if len(preds) != len(refs):
        raise SampleIdMismatch(f"{len(preds)} predictions vs {len(refs)} references")
    cm = ConfusionMatrix3()
    for (pid, plabel), (rid, rlabel) in zip(preds, refs):
        if pid != rid:
            raise SampleIdMismatch(f"prediction {pid!r} aligned with reference {rid!r}")
        cm.add(rlabel, plabel)
    return cm


@dataclass(frozen=True)
class PerClass:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassMetrics:
    per_class: dict[str, PerClass]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    total_support: int

    def to_dict(self) -> dict:
        return {
            "per_class": {
                k: {"precision": v.precision, "recall": v.recall, "f1": v.f1, "support": v.support}
                for k, v in self.per_class.items()
            },
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
                "support": self.total_support,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassMetrics":
        return cls(
            {k: PerClass(**v) for k, v in d["per_class"].items()},
            d["macro"]["precision"],
            d["macro"]["recall"],
            d["macro"]["f1"],
            d["macro"]["support"],
        )


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def per_class_metrics(cm: ConfusionMatrix3) -> ClassMetrics:
    per: dict[str, PerClass] = {}
    for label in LABELS:
        k = _COL[label]
        tp = cm.counts[k][k]
        predicted = sum(cm.counts[r][k] for r in range(3))
        support = cm.support(label)
        p = _ratio(tp, predicted)
        r = _ratio(tp, support)
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per[label.value] = PerClass(p, r, f1, support)
    vals = list(per.values())
    return ClassMetrics(
        per,
        sum(v.precision for v in vals) / 3,
        sum(v.recall for v in vals) / 3,
        sum(v.f1 for v in vals) / 3,
        cm.total,
    )


# ---------------------------------------------------------------------------
# grounding


@dataclass(frozen=True)
class GroundingStats:
    """IoU summary.

    ``hit_rate`` divides by every scored sample (box-less predictions count
    as misses); ``hit_rate_boxed`` divides only by samples with a box;
    ``mean_iou`` averages over samples with a box.
    """

    mean_iou: float
    hit_rate: float
    hit_rate_boxed: float
    n_scored: int
    n_with_box: int
    n_hits: int
    threshold: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def grounding_stats(
    ious: Iterable[float | None], threshold: float = 0.5
) -> GroundingStats:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    boxed: list[float] = []
    n = 0
    for v in ious:
        n += 1
        if v is not None:
            boxed.append(v)
    hits = sum(1 for v in boxed if v > threshold)
    return GroundingStats(
        mean_iou=math.fsum(boxed) / len(boxed) if boxed else 0.0,
        hit_rate=_ratio(hits, n),
        hit_rate_boxed=_ratio(hits, len(boxed)),
        n_scored=n,
        n_with_box=len(boxed),
        n_hits=hits,
        threshold=threshold,
    )


# ---------------------------------------------------------------------------
# per-anatomy


OTHER = "other"


@dataclass(frozen=True)
class AnatomyRow:
    anatomy: str
    accuracy: float
    support: int
    correct: int


def per_anatomy_accuracy(
    scores: Iterable[SampleScore] | dict[str, tuple[int, int]],
    min_support: int = 1,
) -> list[AnatomyRow]:
    """Accuracy grouped by reference anatomy, best first.

    Accepts scored samples or pre-aggregated ``{anatomy: (correct, support)}``.
    Groups with fewer than ``min_support`` samples are pooled into a trailing
    ``other`` row.
    """
    if isinstance(scores, dict):
        tally = {k: list(v) for k, v in scores.items()}
    else:
        tally = {}
        for s in scores:
            t = tally.setdefault(s.anatomy, [0, 0])
            t[0] += s.correct
            t[1] += 1
    rows, other = [], [0, 0]
    for anatomy, (correct, support) in tally.items():
        if support < min_support or anatomy == OTHER:
            other[0] += correct
            other[1] += support
        else:
            rows.append(AnatomyRow(anatomy, correct / support, support, correct))
    rows.sort(key=lambda r: (-r.accuracy, -r.support, r.anatomy))
    if other[1]:
        rows.append(AnatomyRow(OTHER, other[0] / other[1], other[1], other[0]))
    return rows
