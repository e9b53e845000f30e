"""Grounded temporal report grammar.

A grounded finding is rendered as one sentence carrying an inline box token::

    Interval worsening of pneumothorax <box>0.196,0.107,0.522,0.634</box> in right lung.
    Interval improvement of opacity <box>...</box> in cardiac silhouette.
    effusion <box>...</box> in left lung is stable.

:func:`serialize_finding` emits exactly these templates; :func:`parse_report`
recovers findings from arbitrary text (model output included) and reports
problems as values rather than raising.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import math
import os
import re
import string
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DegenerateBox, InvalidBox, TraceBenchError

__all__ = [
    "ANATOMY_REGIONS",
    "BoundingBox",
    "ChangeLabel",
    "DEFAULT_ANATOMY",
    "DEFAULT_LEXICON",
    "GroundedFinding",
    "Lexicon",
    "ParseIssue",
    "TemporalReport",
    "extract_change_label",
    "format_coord",
    "normalize_box",
    "normalize_text",
    "parse_report",
    "serialize_finding",
    "serialize_report",
]


class ChangeLabel(str, enum.Enum):
    WORSENED = "worsened"
    IMPROVED = "improved"
    STABLE = "stable"

    @classmethod
    def parse(cls, value: str) -> "ChangeLabel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(
                f"change must be one of worsened|improved|stable, got {value!r}"
            ) from None


LABELS: tuple[ChangeLabel, ...] = tuple(ChangeLabel)

# Regions reported individually in the per-anatomy breakdown by default.
DEFAULT_ANATOMY: tuple[str, ...] = (
    "mediastinum",
    "cardiac silhouette",
    "right hilar",
    "right lung",
    "left lung",
)

# The 29 scene-graph anatomical regions. Hilar structures use the short form
# that appears in generated text.
ANATOMY_REGIONS: tuple[str, ...] = (
    "right lung",
    "right upper lung zone",
    "right mid lung zone",
    "right lower lung zone",
    "right hilar",
    "right apical zone",
    "right costophrenic angle",
    "right hemidiaphragm",
    "left lung",
    "left upper lung zone",
    "left mid lung zone",
    "left lower lung zone",
    "left hilar",
    "left apical zone",
    "left costophrenic angle",
    "left hemidiaphragm",
    "trachea",
    "spine",
    "right clavicle",
    "left clavicle",
    "aortic arch",
    "mediastinum",
    "upper mediastinum",
    "svc",
    "cardiac silhouette",
    "cavoatrial junction",
    "right atrium",
    "carina",
    "abdomen",
)

_STRIP_CHARS = string.punctuation + string.whitespace
_Q = Decimal("0.001")


def normalize_text(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation."""
    return " ".join(text.lower().split()).strip(_STRIP_CHARS)


def format_coord(value: float) -> str:
    """Render a coordinate with exactly three decimals, rounding half up.

    Rounding works on the shortest decimal repr of the float, so ``0.0005``
    becomes ``0.001`` even though its binary value is slightly below half.
    """
    r = repr(float(value))
    head, dot, frac = r.partition(".")
    if dot and len(frac) <= 3 and frac.isdigit():
        # already on the 3-decimal grid: padding is exact
        return f"{head}.{frac:0<3}"
    return str(Decimal(r).quantize(_Q, rounding=ROUND_HALF_UP))


@dataclass(frozen=True, slots=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        try:
            ok = 0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0
        except TypeError:
            raise InvalidBox(f"non-numeric coordinate in {coords}") from None
        if not ok:
            # NaN fails every comparison and inf fails the bounds, so both land here
            raise InvalidBox(
                f"box {coords} violates 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_token(self) -> str:
        return "<box>" + ",".join(format_coord(c) for c in self.as_tuple()) + "</box>"

    def quantized(self) -> "BoundingBox":
        """The box as it reads back after a serialize/parse cycle."""
        return BoundingBox(*(float(format_coord(c)) for c in self.as_tuple()))


def normalize_box(
    px: Iterable[float], width: float, height: float
) -> BoundingBox:
    """Convert a pixel rectangle ``(x1, y1, x2, y2)`` to normalized coordinates.

    Raises:
        DegenerateBox: zero or negative extent on either axis.
        InvalidBox: bad image size, wrong arity, or rectangle outside the image.
    """
    coords = tuple(float(v) for v in px)
    if len(coords) != 4:
        raise InvalidBox(f"expected 4 pixel coordinates, got {len(coords)}")
    if not (width > 0 and height > 0):
        raise InvalidBox(f"image size must be positive, got {width}x{height}")
    x1, y1, x2, y2 = coords
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBox(f"pixel box {coords} has no extent")
    if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
        raise InvalidBox(f"pixel box {coords} outside {width}x{height} image")
    return BoundingBox(x1 / width, y1 / height, x2 / width, y2 / height)


@dataclass(frozen=True, slots=True)
class GroundedFinding:
    finding: str
    change: ChangeLabel
    box: BoundingBox
    anatomy: str

    def __post_init__(self) -> None:
        finding = normalize_text(self.finding)
        anatomy = normalize_text(self.anatomy)
        if not finding or not anatomy:
            raise ValueError("finding and anatomy must be non-empty")
        object.__setattr__(self, "finding", finding)
        object.__setattr__(self, "anatomy", anatomy)
        if self.change.__class__ is not ChangeLabel:
            object.__setattr__(self, "change", ChangeLabel.parse(self.change))

    def quantized(self) -> "GroundedFinding":
        return GroundedFinding(self.finding, self.change, self.box.quantized(), self.anatomy)


def serialize_finding(f: GroundedFinding) -> str:
    box = f.box.to_token()
    if f.change is ChangeLabel.WORSENED:
        return f"Interval worsening of {f.finding} {box} in {f.anatomy}."
    if f.change is ChangeLabel.IMPROVED:
        return f"Interval improvement of {f.finding} {box} in {f.anatomy}."
    return f"{f.finding} {box} in {f.anatomy} is stable."


def serialize_report(findings: Iterable[GroundedFinding]) -> str:
    return " ".join(serialize_finding(f) for f in findings)


# ---------------------------------------------------------------------------
# change-cue lexicon

DEFAULT_LEXICON: Mapping[str, ChangeLabel] = {
    "worsening": ChangeLabel.WORSENED,
    "worsened": ChangeLabel.WORSENED,
    "increased": ChangeLabel.WORSENED,
    "progression": ChangeLabel.WORSENED,
    "improvement": ChangeLabel.IMPROVED,
    "improved": ChangeLabel.IMPROVED,
    "improving": ChangeLabel.IMPROVED,
    "decreased": ChangeLabel.IMPROVED,
    "resolving": ChangeLabel.IMPROVED,
    "resolved": ChangeLabel.IMPROVED,
    "stable": ChangeLabel.STABLE,
    "unchanged": ChangeLabel.STABLE,
    "no change": ChangeLabel.STABLE,
}

LEXICON_ENV = "TRACE_BENCH_LEXICON"


class Lexicon:
    """Phrase -> change label table with leftmost-match lookup.

    When two phrases start at the same offset the longer one wins.
    """

    def __init__(self, phrases: Mapping[str, ChangeLabel | str]):
        table: dict[str, ChangeLabel] = {}
        for phrase, label in phrases.items():
            key = normalize_text(phrase)
            if not key:
                raise ValueError("empty lexicon phrase")
            table[key] = ChangeLabel.parse(label) if isinstance(label, str) else label
        if not table:
            raise ValueError("lexicon is empty")
        self.phrases: dict[str, ChangeLabel] = dict(sorted(table.items()))
        alternation = "|".join(
            r"\s+".join(map(re.escape, p.split(" ")))
            for p in sorted(self.phrases, key=lambda p: (-len(p), p))
        )
        self.alternation = alternation
        self._re = re.compile(rf"\b(?:{alternation})\b", re.IGNORECASE)
        digest = hashlib.sha1(
            "\n".join(f"{p}\t{l.value}" for p, l in self.phrases.items()).encode()
        ).hexdigest()
        self.version = digest[:12]

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "Lexicon":
        """Read a ``phrase<TAB>label`` file. Blank lines and ``#`` comments are skipped."""
        phrases: dict[str, str] = {}
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise TraceBenchError(f"{path}: {exc.strerror or exc}") from None
        with fh:
            for line_no, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise TraceBenchError(f"{path}:{line_no}: expected 'phrase<TAB>label'")
                try:
                    phrases[parts[0]] = ChangeLabel.parse(parts[1])
                except ValueError as exc:
                    raise TraceBenchError(f"{path}:{line_no}: {exc}") from None
        if not phrases:
            raise TraceBenchError(f"{path}: lexicon file defines no phrases")
        return cls(phrases)

    @classmethod
    def from_env(cls) -> "Lexicon":
        path = os.environ.get(LEXICON_ENV)
        return cls.from_file(path) if path else DEFAULT

    def search(self, text: str) -> re.Match | None:
        return self._re.search(text)

    def label(self, sentence: str) -> ChangeLabel | None:
        m = self._re.search(sentence)
        if m is None:
            return None
        hit = m.group(0).lower()
        label = self.phrases.get(hit)
        return label if label is not None else self.phrases[normalize_text(hit)]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Lexicon) and other.phrases == self.phrases

    def __hash__(self) -> int:
        return hash(self.version)

    def __repr__(self) -> str:
        return f"Lexicon({len(self.phrases)} phrases, version={self.version})"


DEFAULT = Lexicon(DEFAULT_LEXICON)


def extract_change_label(sentence: str, lexicon: Lexicon | None = None) -> ChangeLabel | None:
    """Return the label of the first cue phrase in ``sentence``; ``None`` means Unknown."""
    return (lexicon or DEFAULT).label(sentence)


# ---------------------------------------------------------------------------
# parsing

MALFORMED_BOX = "MalformedBox"
UNKNOWN_CHANGE = "UnknownChangePhrase"


@dataclass(frozen=True, slots=True)
class ParseIssue:
    kind: str
    start: int
    end: int
    message: str
    # Set for UnknownChangePhrase when the coordinates themselves were fine.
    box: BoundingBox | None = None


@dataclass(frozen=True)
class TemporalReport:
    findings: tuple[GroundedFinding, ...] = ()
    raw_text: str = ""
    issues: tuple[ParseIssue, ...] = ()
    spans: tuple[tuple[int, int], ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.findings)


_BOX_RE = re.compile(r"<box>(.*?)</box>", re.IGNORECASE | re.DOTALL)
_SENT_END_RE = re.compile(r"\.(?=\s|$)")
_ANATOMY_LEAD_RE = re.compile(r"^\W*(?:in|within|at|of|involving)\s+", re.IGNORECASE)
_ANATOMY_TAIL_RE = re.compile(
    r"(?:,|;|\s(?:is|are|remains?|appears?|has|have|which|that|with|since|compared)\b).*$",
    re.IGNORECASE | re.DOTALL,
)
_PLACEHOLDER = "unspecified"

_lead_cache: dict[str, re.Pattern] = {}


def _finding_lead_re(lexicon: Lexicon) -> re.Pattern:
    pat = _lead_cache.get(lexicon.version)
    if pat is None:
        pat = re.compile(
            rf"^(?:.*?\binterval\s+)?(?:{lexicon.alternation})\s+(?:of|in)\s+",
            re.IGNORECASE | re.DOTALL,
        )
        _lead_cache[lexicon.version] = pat
    return pat


def _parse_coords(raw: str) -> tuple[BoundingBox | None, str]:
    parts = raw.split(",")
    if len(parts) != 4:
        return None, f"expected 4 coordinates, got {len(parts)}"
    try:
        coords = [float(p) for p in parts]
    except ValueError:
        return None, f"non-numeric coordinate in {raw!r}"
    try:
        return BoundingBox(*coords), ""
    except InvalidBox as exc:
        return None, str(exc)


def _sentence_ends(text: str, boxes: list[re.Match]) -> list[int]:
    """Offsets just past each sentence-ending period outside box tokens."""
    ends = []
    j = 0
    for m in _SENT_END_RE.finditer(text):
        pos = m.start()
        while j < len(boxes) and boxes[j].end() <= pos:
            j += 1
        if j < len(boxes) and boxes[j].start() <= pos:
            continue
        ends.append(m.end())
    return ends


def parse_report(text: str, lexicon: Lexicon | None = None) -> TemporalReport:
    """Extract grounded findings from free text.

    Never raises on text input. Boxes that fail to parse yield a
    ``MalformedBox`` issue; boxes whose sentence has no change cue yield an
    ``UnknownChangePhrase`` issue. Neither produces a finding.
    """
    lexicon = lexicon or DEFAULT
    if not isinstance(text, str):
        text = "" if text is None else str(text)
    boxes = list(_BOX_RE.finditer(text))
    if not boxes:
        return TemporalReport(raw_text=text)
    ends = _sentence_ends(text, boxes)
    lead_re = _finding_lead_re(lexicon)

    findings: list[GroundedFinding] = []
    spans: list[tuple[int, int]] = []
    issues: list[ParseIssue] = []
    for i, m in enumerate(boxes):
        k = bisect.bisect_right(ends, m.start())
        sent_start = ends[k - 1] if k else 0
        sent_end = ends[k] if k < len(ends) else len(text)

        box, why = _parse_coords(m.group(1))
        if box is None:
            issues.append(ParseIssue(MALFORMED_BOX, m.start(), m.end(), why))
            continue

        sentence = text[sent_start : m.start()] + " " + text[m.end() : sent_end]
        label = lexicon.label(sentence)
        if label is None:
            issues.append(
                ParseIssue(UNKNOWN_CHANGE, m.start(), m.end(), "no change cue in sentence", box)
            )
            continue

        # one box per sentence is the norm; with several, each owns the text up to its neighbours
        lo = max(sent_start, boxes[i - 1].end()) if i else sent_start
        hi = min(sent_end, boxes[i + 1].start()) if i + 1 < len(boxes) else sent_end
        prefix = text[lo : m.start()]
        suffix = text[m.end() : hi]

        finding = normalize_text(lead_re.sub("", prefix, count=1)) or _PLACEHOLDER
        anatomy = normalize_text(_ANATOMY_TAIL_RE.sub("", _ANATOMY_LEAD_RE.sub("", suffix, count=1)))
        findings.append(GroundedFinding(finding, label, box, anatomy or _PLACEHOLDER))
        spans.append((sent_start, sent_end))

    return TemporalReport(tuple(findings), text, tuple(issues), tuple(spans))
