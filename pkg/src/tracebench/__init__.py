"""Grounded temporal chest X-ray reports: grammar, corpus construction, evaluation."""

__version__ = "0.1.0"

from .grammar import (  # noqa: E402
    BoundingBox,
    ChangeLabel,
    GroundedFinding,
    Lexicon,
    TemporalReport,
    extract_change_label,
    normalize_box,
    parse_report,
    serialize_finding,
)

__all__ = [
    "BoundingBox",
    "ChangeLabel",
    "GroundedFinding",
    "Lexicon",
    "TemporalReport",
    "__version__",
    "extract_change_label",
    "normalize_box",
    "parse_report",
    "serialize_finding",
]
