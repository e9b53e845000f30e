"""Temporal sample construction from per-patient study records.

Pipeline: group studies by patient, order them by ``study_order``, pair
each study with its immediate predecessor, then emit one sample per change
annotation on the current study.
"""

from __future__ import annotations

import functools
import logging
import math
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import (
    DuplicateStudyOrder,
    InvalidBox,
    InvalidDistribution,
    UnassignedPatient,
    UnsortedInput,
)
from .grammar import (
    ANATOMY_REGIONS,
    LABELS,
    BoundingBox,
    ChangeLabel,
    GroundedFinding,
    normalize_box,
    serialize_finding,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Annotation:
    finding: str
    anatomy: str
    change: ChangeLabel
    box_px: tuple[float, float, float, float]

    @classmethod
    def from_dict(cls, d: Mapping) -> "Annotation":
        box = d["box_px"]
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise ValueError("box_px must be a list of 4 numbers")
        return cls(str(d["finding"]), str(d["anatomy"]), ChangeLabel.parse(d["change"]), tuple(box))

    def to_dict(self) -> dict:
        return {
            "finding": self.finding,
            "anatomy": self.anatomy,
            "change": self.change.value,
            "box_px": list(self.box_px),
        }


@dataclass(frozen=True)
class StudyRecord:
    patient_id: str
    study_id: str
    study_order: int
    image_id: str
    image_width: int
    image_height: int
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self) -> None:
        if not (self.image_width > 0 and self.image_height > 0):
            raise ValueError(f"study {self.study_id}: image size must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudyRecord":
        order = d["study_order"]
        if isinstance(order, bool) or not isinstance(order, int):
            raise ValueError("study_order must be an integer")
        return cls(
            patient_id=str(d["patient_id"]),
            study_id=str(d["study_id"]),
            study_order=order,
            image_id=str(d["image_id"]),
            image_width=d["image_width"],
            image_height=d["image_height"],
            annotations=tuple(Annotation.from_dict(a) for a in d.get("annotations", ())),
        )

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "study_id": self.study_id,
            "study_order": self.study_order,
            "image_id": self.image_id,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "annotations": [a.to_dict() for a in self.annotations],
        }


@dataclass(frozen=True)
class TemporalPair:
    patient_id: str
    prior: StudyRecord
    current: StudyRecord


@dataclass(frozen=True)
class Sample:
    sample_id: str
    patient_id: str
    prior_image_id: str
    current_image_id: str
    reference: GroundedFinding
    split: str | None = None

    @functools.cached_property
    def reference_text(self) -> str:
        return serialize_finding(self.reference)

    def to_dict(self) -> dict:
        ref = self.reference
        return {
            "sample_id": self.sample_id,
            "patient_id": self.patient_id,
            "prior_image_id": self.prior_image_id,
            "current_image_id": self.current_image_id,
            "split": self.split,
            "reference_text": self.reference_text,
            "reference": {
                "finding": ref.finding,
                "anatomy": ref.anatomy,
                "change": ref.change.value,
                "box": list(ref.box.as_tuple()),
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Sample":
        r = d["reference"]
        box = r["box"]
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise ValueError("reference.box must be a list of 4 numbers")
        split = d.get("split")
        if split is not None and split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return cls(
            sample_id=str(d["sample_id"]),
            patient_id=str(d["patient_id"]),
            prior_image_id=str(d["prior_image_id"]),
            current_image_id=str(d["current_image_id"]),
            reference=GroundedFinding(
                r["finding"], ChangeLabel.parse(r["change"]), BoundingBox(*box), r["anatomy"]
            ),
            split=split,
        )


# ---------------------------------------------------------------------------
# pairing


def _pair_group(patient_id: str, studies: list[StudyRecord]) -> list[TemporalPair]:
    ordered = sorted(studies, key=lambda s: s.study_order)
    for a, b in zip(ordered, ordered[1:]):
        if a.study_order == b.study_order:
            raise DuplicateStudyOrder(
                f"patient {patient_id!r} has studies {a.study_id!r} and {b.study_id!r} "
                f"with study_order {a.study_order}"
            )
    return [TemporalPair(patient_id, a, b) for a, b in zip(ordered, ordered[1:])]


def build_pairs(studies: Iterable[StudyRecord]) -> list[TemporalPair]:
    """Pair every study with its immediate predecessor within the same patient.

    Patients appear in first-seen order; pairs within a patient are
    chronological.
    """
    groups: dict[str, list[StudyRecord]] = {}
    for s in studies:
        groups.setdefault(s.patient_id, []).append(s)
    pairs: list[TemporalPair] = []
    for pid, group in groups.items():
        pairs.extend(_pair_group(pid, group))
    return pairs


def iter_patient_groups(studies: Iterable[StudyRecord]) -> Iterator[list[StudyRecord]]:
    """Stream contiguous per-patient groups from input sorted by ``patient_id``.

    Raises:
        UnsortedInput: a patient id smaller than its predecessor is seen.
    """
    group: list[StudyRecord] = []
    for s in studies:
        if group and s.patient_id != group[0].patient_id:
            if s.patient_id < group[0].patient_id:
                raise UnsortedInput(
                    f"input not sorted by patient_id: {s.patient_id!r} after {group[0].patient_id!r}"
                )
            yield group
            group = []
        group.append(s)
    if group:
        yield group


def iter_pairs_streaming(studies: Iterable[StudyRecord]) -> Iterator[TemporalPair]:
    """Like :func:`build_pairs` but memory-bounded by the largest patient group."""
    for group in iter_patient_groups(studies):
        yield from _pair_group(group[0].patient_id, group)


# ---------------------------------------------------------------------------
# samples


def iter_samples(
    pairs: Iterable[TemporalPair], skip_log: list[dict] | None = None
) -> Iterator[Sample]:
    for pair in pairs:
        cur = pair.current
        for k, ann in enumerate(cur.annotations):
            try:
                # references use the grammar's 3-decimal precision so that an
                # exact echo of reference_text reproduces the reference box
                box = normalize_box(ann.box_px, cur.image_width, cur.image_height).quantized()
                ref = GroundedFinding(ann.finding, ann.change, box, ann.anatomy)
            except (InvalidBox, ValueError) as exc:
                entry = {
                    "patient_id": pair.patient_id,
                    "study_id": cur.study_id,
                    "annotation_index": k,
                    "reason": f"{type(exc).__name__}: {exc}",
                }
                log.warning("skipping annotation %s#%d: %s", cur.study_id, k, exc)
                if skip_log is not None:
                    skip_log.append(entry)
                continue
            yield Sample(
                sample_id=f"{cur.study_id}#{k}",
                patient_id=pair.patient_id,
                prior_image_id=pair.prior.image_id,
                current_image_id=cur.image_id,
                reference=ref,
            )


def emit_samples(
    pairs: Iterable[TemporalPair], skip_log: list[dict] | None = None
) -> list[Sample]:
    """One sample per change annotation on each pair's current study.

    Annotations whose box cannot be normalized are skipped; a record of each
    skip is appended to ``skip_log`` when given.
    """
    return list(iter_samples(pairs, skip_log))


def split_corpus(
    samples: Iterable[Sample], assignment: Mapping[str, str]
) -> dict[str, list[Sample]]:
    """Partition samples by their patient's split. Output keys: train, val, test."""
    out: dict[str, list[Sample]] = {s: [] for s in SPLITS}
    for s in samples:
        try:
            split = assignment[s.patient_id]
        except KeyError:
            raise UnassignedPatient(f"patient {s.patient_id!r} has no split assignment") from None
        if split not in out:
            raise ValueError(f"unknown split {split!r} for patient {s.patient_id!r}")
        out[split].append(replace(s, split=split))
    return out


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DistributionStats:
    n_samples: int = 0
    label_counts: dict[str, int] = field(default_factory=lambda: {l.value: 0 for l in LABELS})
    anatomy_counts: dict[str, int] = field(default_factory=dict)

    def add(self, sample: Sample) -> None:
        self.n_samples += 1
        self.label_counts[sample.reference.change.value] += 1
        a = sample.reference.anatomy
        self.anatomy_counts[a] = self.anatomy_counts.get(a, 0) + 1

    @property
    def empty(self) -> bool:
        return self.n_samples == 0

    @property
    def fractions(self) -> dict[str, float]:
        n = self.n_samples
        return {k: (v / n if n else 0.0) for k, v in self.label_counts.items()}

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "empty": self.empty,
            "label_counts": dict(self.label_counts),
            "label_fractions": self.fractions,
            "anatomy_counts": dict(sorted(self.anatomy_counts.items(), key=lambda kv: (-kv[1], kv[0]))),
        }


def corpus_stats(corpus: Iterable[Sample]) -> DistributionStats:
    stats = DistributionStats()
    for s in corpus:
        stats.add(s)
    return stats


# ---------------------------------------------------------------------------
# synthetic corpora

# Table-6-like anatomy mix; leftovers spread over the remaining regions.
DEFAULT_ANATOMY_DISTRIBUTION: dict[str, float] = {
    "right lung": 0.769,
    "left lung": 0.113,
    "cardiac silhouette": 0.083,
    "mediastinum": 0.015,
    "right hilar": 0.003,
    "left hilar": 0.003,
    "right costophrenic angle": 0.004,
    "left costophrenic angle": 0.004,
    "right lower lung zone": 0.003,
    "left lower lung zone": 0.003,
}

TEST_LABEL_DISTRIBUTION = (0.345, 0.217, 0.438)

# Nominal normalized regions in a frontal view (image left = patient right).
_REGIONS: dict[str, tuple[float, float, float, float]] = {
    "right lung": (0.10, 0.15, 0.47, 0.85),
    "right upper lung zone": (0.12, 0.15, 0.46, 0.38),
    "right mid lung zone": (0.11, 0.38, 0.46, 0.60),
    "right lower lung zone": (0.10, 0.60, 0.46, 0.85),
    "right hilar": (0.33, 0.35, 0.46, 0.55),
    "right apical zone": (0.15, 0.12, 0.42, 0.24),
    "right costophrenic angle": (0.08, 0.74, 0.22, 0.88),
    "right hemidiaphragm": (0.10, 0.76, 0.47, 0.90),
    "left lung": (0.53, 0.15, 0.90, 0.85),
    "left upper lung zone": (0.54, 0.15, 0.88, 0.38),
    "left mid lung zone": (0.54, 0.38, 0.89, 0.60),
    "left lower lung zone": (0.54, 0.60, 0.90, 0.85),
    "left hilar": (0.54, 0.35, 0.67, 0.55),
    "left apical zone": (0.58, 0.12, 0.85, 0.24),
    "left costophrenic angle": (0.78, 0.74, 0.92, 0.88),
    "left hemidiaphragm": (0.53, 0.78, 0.90, 0.92),
    "trachea": (0.46, 0.05, 0.54, 0.32),
    "spine": (0.45, 0.05, 0.55, 0.95),
    "right clavicle": (0.15, 0.12, 0.47, 0.22),
    "left clavicle": (0.53, 0.12, 0.85, 0.22),
    "aortic arch": (0.50, 0.25, 0.62, 0.36),
    "mediastinum": (0.38, 0.10, 0.62, 0.65),
    "upper mediastinum": (0.40, 0.10, 0.60, 0.35),
    "svc": (0.40, 0.22, 0.48, 0.42),
    "cardiac silhouette": (0.36, 0.45, 0.76, 0.80),
    "cavoatrial junction": (0.40, 0.40, 0.48, 0.48),
    "right atrium": (0.36, 0.48, 0.48, 0.75),
    "carina": (0.46, 0.30, 0.54, 0.38),
    "abdomen": (0.10, 0.85, 0.90, 0.99),
}
assert set(_REGIONS) == set(ANATOMY_REGIONS)

_FINDINGS_LUNG = (
    "pneumothorax", "pleural effusion", "atelectasis", "lung opacity",
    "consolidation", "pulmonary edema", "pneumonia",
)
_FINDINGS_BY_REGION = {
    "cardiac silhouette": ("enlarged cardiac silhouette", "cardiomegaly"),
    "mediastinum": ("mediastinal widening", "mediastinal displacement"),
    "upper mediastinum": ("mediastinal widening",),
    "right hilar": ("hilar congestion", "vascular congestion"),
    "left hilar": ("hilar congestion", "vascular congestion"),
    "aortic arch": ("tortuous aorta",),
}
_IMAGE_SIZES = ((2544, 3056), (3056, 2544), (2539, 3050), (2048, 2500))
_BOX_JITTER = 0.04


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 1000
    studies_per_patient: tuple[int, int] = (1, 5)
    annotations_per_study: tuple[int, int] = (0, 4)
    label_distribution: tuple[float, float, float] = TEST_LABEL_DISTRIBUTION
    anatomy_distribution: Mapping[str, float] = field(
        default_factory=lambda: dict(DEFAULT_ANATOMY_DISTRIBUTION)
    )
    seed: int = 0

    def validate(self) -> None:
        _check_distribution("label_distribution", self.label_distribution, expect_len=3)
        _check_distribution("anatomy_distribution", list(self.anatomy_distribution.values()))
        unknown = set(self.anatomy_distribution) - set(_REGIONS)
        if unknown:
            raise InvalidDistribution(f"anatomy without a nominal region: {sorted(unknown)}")
        for name, (lo, hi) in (
            ("studies_per_patient", self.studies_per_patient),
            ("annotations_per_study", self.annotations_per_study),
        ):
            if not 0 <= lo <= hi:
                raise InvalidDistribution(f"{name} range must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.n_patients < 0:
            raise InvalidDistribution("n_patients must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "studies_per_patient": list(self.studies_per_patient),
            "annotations_per_study": list(self.annotations_per_study),
            "label_distribution": list(self.label_distribution),
            "anatomy_distribution": dict(self.anatomy_distribution),
            "seed": self.seed,
        }


def _check_distribution(name: str, probs: Sequence[float], expect_len: int | None = None) -> None:
    if expect_len is not None and len(probs) != expect_len:
        raise InvalidDistribution(f"{name} needs {expect_len} entries, got {len(probs)}")
    if not probs:
        raise InvalidDistribution(f"{name} is empty")
    if any(not math.isfinite(p) or p < 0 for p in probs):
        raise InvalidDistribution(f"{name} has negative or non-finite entries: {list(probs)}")
    if abs(math.fsum(probs) - 1.0) > 1e-6:
        raise InvalidDistribution(f"{name} sums to {math.fsum(probs):.6f}, expected 1")


def _synth_box(rng: random.Random, anatomy: str, w: int, h: int) -> tuple[int, int, int, int]:
    x1, y1, x2, y2 = _REGIONS[anatomy]
    j = _BOX_JITTER
    x1 = min(max(0.0, x1 + rng.uniform(-j, j)), 0.95)
    y1 = min(max(0.0, y1 + rng.uniform(-j, j)), 0.95)
    x2 = max(min(1.0, x2 + rng.uniform(-j, j)), x1 + 0.03)
    y2 = max(min(1.0, y2 + rng.uniform(-j, j)), y1 + 0.03)
    return (round(x1 * w), round(y1 * h), round(x2 * w), round(y2 * h))


def iter_synth_corpus(cfg: SynthConfig) -> Iterator[StudyRecord]:
    cfg.validate()
    rng = random.Random(cfg.seed)
    anatomies = list(cfg.anatomy_distribution)
    a_weights = list(cfg.anatomy_distribution.values())
    width = len(str(max(cfg.n_patients - 1, 0)))
    for p in range(cfg.n_patients):
        pid = f"p{p:0{width}d}"
        n_studies = rng.randint(*cfg.studies_per_patient)
        order = 0
        for s in range(n_studies):
            order += rng.randint(1, 3)
            study_id = f"{pid}-s{s}"
            w, h = rng.choice(_IMAGE_SIZES)
            anns = []
            for _ in range(rng.randint(*cfg.annotations_per_study)):
                anatomy = rng.choices(anatomies, a_weights)[0]
                change = rng.choices(LABELS, cfg.label_distribution)[0]
                finding = rng.choice(_FINDINGS_BY_REGION.get(anatomy, _FINDINGS_LUNG))
                anns.append(Annotation(finding, anatomy, change, _synth_box(rng, anatomy, w, h)))
            yield StudyRecord(pid, study_id, order, f"{study_id}-img", w, h, tuple(anns))


def synth_corpus(cfg: SynthConfig) -> list[StudyRecord]:
    """Deterministic synthetic study records (sorted by patient id).

    Raises:
        InvalidDistribution: malformed label/anatomy distribution or ranges.
    """
    return list(iter_synth_corpus(cfg))


def assign_splits(
    patient_ids: Iterable[str], fractions: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0
) -> dict[str, str]:
    """Random patient-level split assignment with the given train/val/test fractions."""
    _check_distribution("split fractions", fractions, expect_len=3)
    rng = random.Random(f"splits/{seed}")
    return {pid: rng.choices(SPLITS, fractions)[0] for pid in patient_ids}
