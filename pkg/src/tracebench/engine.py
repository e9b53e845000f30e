"""Corpus-level evaluation: join references with predictions, score, aggregate.

Scoring is a map over samples into an :class:`Accumulator`; accumulators
from any sharding merge into the same report. Every corpus mean is an
exactly rounded ``math.fsum`` over values ordered by sample id, so the
report does not depend on worker count or shard boundaries.
"""

from __future__ import annotations

import contextlib
import csv
import gc
import hashlib
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from . import __version__
from .corpus import Sample
from .detection import (
    UNKNOWN,
    AnatomyRow,
    ClassMetrics,
    ConfusionMatrix3,
    GroundingStats,
    grounding_stats,
    per_anatomy_accuracy,
    per_class_metrics,
    score_sample,
)
from .errors import ConfigMismatch, DuplicatePredictionId, SampleIdMismatch
from .grammar import DEFAULT, ChangeLabel, Lexicon, parse_report
from .io import iter_jsonl, open_text
from .nlg import (
    BLEU_EPSILON,
    ROUGE_BETA,
    NlgScores,
    bleu4,
    meteor_lite,
    rouge_l,
    tokenize,
)

METRIC_VARIANTS = {
    "bleu4": f"sentence-level, uniform 1-4 gram weights, add-epsilon {BLEU_EPSILON:g}",
    "meteor": "meteor_lite: exact+stem alignment, no synonyms, alpha 0.9, gamma 0.5, beta 3",
    "rouge_l": f"LCS F-measure, beta {ROUGE_BETA}",
    "aggregation": "unweighted mean of per-sample scores",
}


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    min_anatomy_support: int = 1
    lexicon: Lexicon = DEFAULT

    def __post_init__(self) -> None:
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.min_anatomy_support < 1:
            raise ValueError("min_anatomy_support must be >= 1")

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "min_anatomy_support": self.min_anatomy_support,
            "lexicon_version": self.lexicon.version,
            "metric_variants": dict(METRIC_VARIANTS),
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, slots=True)
class SampleRecord:
    sample_id: str
    true_label: ChangeLabel
    pred_label: ChangeLabel | None
    iou: float | None
    bleu4: float
    meteor: float
    rouge_l: float
    anatomy: str
    matched: bool = True
    parse_errors: int = 0

    @property
    def correct(self) -> bool:
        return self.pred_label is self.true_label

    def csv_row(self) -> list[str]:
        return [
            self.sample_id,
            UNKNOWN if self.pred_label is None else self.pred_label.value,
            self.true_label.value,
            "" if self.iou is None else repr(self.iou),
            repr(self.bleu4),
            repr(self.meteor),
            repr(self.rouge_l),
        ]


CSV_COLUMNS = ["sample_id", "pred_label", "true_label", "iou", "bleu4", "meteor", "rouge_l"]


def score_pair(sample: Sample, prediction: str | None, cfg: EvalConfig) -> SampleRecord:
    """Score one reference/prediction pair. ``None`` prediction scores worst case."""
    ref = sample.reference
    if prediction is None:
        return SampleRecord(
            sample.sample_id, ref.change, None, None, 0.0, 0.0, 0.0, ref.anatomy, matched=False
        )
    report = parse_report(prediction, cfg.lexicon)
    s = score_sample(report, ref, sample.sample_id, cfg.lexicon)
    hyp = tokenize(prediction)
    gold = tokenize(sample.reference_text)
    return SampleRecord(
        sample.sample_id,
        s.true_label,
        s.pred_label,
        s.iou,
        bleu4(hyp, gold),
        meteor_lite(hyp, gold),
        rouge_l(hyp, gold),
        s.anatomy,
        True,
        s.parse_errors,
    )


@dataclass
class Accumulator:
    """Mergeable partial evaluation state.

    Integer tallies are kept alongside the per-sample records; the records
    hold the float scores that the final report averages.
    """

    config_digest: str
    records: dict[str, SampleRecord] = field(default_factory=dict)
    confusion: ConfusionMatrix3 = field(default_factory=ConfusionMatrix3)
    anatomy: dict[str, list[int]] = field(default_factory=dict)
    n_unmatched: int = 0
    n_parse_errors: int = 0

    def add(self, rec: SampleRecord) -> None:
        if rec.sample_id in self.records:
            raise SampleIdMismatch(f"sample {rec.sample_id!r} scored twice")
        self.records[rec.sample_id] = rec
        self.confusion.add(rec.true_label, rec.pred_label)
        tally = self.anatomy.setdefault(rec.anatomy, [0, 0])
        tally[0] += rec.correct
        tally[1] += 1
        self.n_unmatched += not rec.matched
        self.n_parse_errors += rec.parse_errors

    def __len__(self) -> int:
        return len(self.records)


def merge(a: Accumulator, b: Accumulator) -> Accumulator:
    """Combine two accumulators over disjoint samples. Neither input is modified."""
    if a.config_digest != b.config_digest:
        raise ConfigMismatch(f"cannot merge results of configs {a.config_digest} and {b.config_digest}")
    overlap = a.records.keys() & b.records.keys()
    if overlap:
        raise SampleIdMismatch(f"{len(overlap)} samples present in both accumulators, e.g. {min(overlap)!r}")
    anatomy = {k: list(v) for k, v in a.anatomy.items()}
    for k, (c, n) in b.anatomy.items():
        t = anatomy.setdefault(k, [0, 0])
        t[0] += c
        t[1] += n
    return Accumulator(
        a.config_digest,
        {**a.records, **b.records},
        a.confusion.merge(b.confusion),
        anatomy,
        a.n_unmatched + b.n_unmatched,
        a.n_parse_errors + b.n_parse_errors,
    )


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class EvalReport:
    nlg: NlgScores
    grounding: GroundingStats
    accuracy: float
    class_metrics: ClassMetrics
    confusion: ConfusionMatrix3
    per_anatomy: tuple[AnatomyRow, ...]
    counts: dict[str, int]
    config: dict

    def to_dict(self) -> dict:
        return {
            "tool": {"name": "tracebench", "version": __version__},
            "config": self.config,
            "counts": dict(self.counts),
            "nlg": {"bleu4": self.nlg.bleu4, "meteor": self.nlg.meteor, "rouge_l": self.nlg.rouge_l},
            "grounding": self.grounding.to_dict(),
            "change": {
                "accuracy": self.accuracy,
                **self.class_metrics.to_dict(),
                "confusion": self.confusion.to_dict(),
            },
            "per_anatomy": [
                {"anatomy": r.anatomy, "accuracy": r.accuracy, "support": r.support, "correct": r.correct}
                for r in self.per_anatomy
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        ch = d["change"]
        return cls(
            nlg=NlgScores(**d["nlg"]),
            grounding=GroundingStats(**d["grounding"]),
            accuracy=ch["accuracy"],
            class_metrics=ClassMetrics.from_dict(ch),
            confusion=ConfusionMatrix3.from_dict(ch["confusion"]),
            per_anatomy=tuple(AnatomyRow(**r) for r in d["per_anatomy"]),
            counts=dict(d["counts"]),
            config=dict(d["config"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _mean(values: Iterable[float]) -> float:
    vals = list(values)
    return math.fsum(vals) / len(vals) if vals else 0.0


def finalize(acc: Accumulator, cfg: EvalConfig, n_preds: int, n_orphan_preds: int = 0) -> EvalReport:
    if acc.config_digest != cfg.digest:
        raise ConfigMismatch("accumulator was produced under a different config")
    recs = [acc.records[k] for k in sorted(acc.records)]
    n = len(recs)
    return EvalReport(
        nlg=NlgScores(
            _mean(r.bleu4 for r in recs),
            _mean(r.meteor for r in recs),
            _mean(r.rouge_l for r in recs),
        ),
        grounding=grounding_stats((r.iou for r in recs), cfg.iou_threshold),
        accuracy=acc.confusion.accuracy,
        class_metrics=per_class_metrics(acc.confusion),
        confusion=acc.confusion,
        per_anatomy=tuple(
            per_anatomy_accuracy(
                {k: tuple(v) for k, v in sorted(acc.anatomy.items())}, cfg.min_anatomy_support
            )
        ),
        counts={
            "n_refs": n,
            "n_preds": n_preds,
            "n_scored": n - acc.n_unmatched,
            "n_unmatched": acc.n_unmatched,
            "n_orphan_preds": n_orphan_preds,
            "n_parse_errors": acc.n_parse_errors,
        },
        config={**cfg.to_dict(), "config_digest": cfg.digest},
    )


# ---------------------------------------------------------------------------
# orchestration


@contextlib.contextmanager
def _gc_paused():
    # scoring allocates only acyclic objects; cyclic GC passes over a large
    # live corpus cost ~15% of runtime for nothing
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def _score_shard(args: tuple[list[tuple[Sample, str | None]], EvalConfig]) -> Accumulator:
    pairs, cfg = args
    acc = Accumulator(cfg.digest)
    with _gc_paused():
        for sample, pred in pairs:
            acc.add(score_pair(sample, pred, cfg))
    return acc


def _bounds(n: int, k: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into ``k`` contiguous near-equal ranges."""
    k = max(1, min(k, n))
    size, extra = divmod(n, k)
    out, start = [], 0
    for i in range(k):
        end = start + size + (i < extra)
        out.append((start, end))
        start = end
    return out


# Joined pairs visible to forked workers, so shards travel as index ranges
# instead of pickled samples.
_FORK_STATE: tuple[list[tuple[Sample, str | None]], EvalConfig] | None = None


def _score_range(bounds: tuple[int, int]) -> Accumulator:
    pairs, cfg = _FORK_STATE
    lo, hi = bounds
    return _score_shard((pairs[lo:hi], cfg))


def _score_parallel(pairs: list[tuple[Sample, str | None]], cfg: EvalConfig, workers: int) -> list[Accumulator]:
    global _FORK_STATE
    bounds = _bounds(len(pairs), workers)
    if "fork" in multiprocessing.get_all_start_methods():
        _FORK_STATE = (pairs, cfg)
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=len(bounds), mp_context=ctx) as pool:
                return list(pool.map(_score_range, bounds))
        finally:
            _FORK_STATE = None
    with ProcessPoolExecutor(max_workers=len(bounds)) as pool:
        return list(pool.map(_score_shard, [(pairs[lo:hi], cfg) for lo, hi in bounds]))


@dataclass
class Evaluation:
    report: EvalReport
    records: list[SampleRecord]

    def write_csv(self, path) -> None:
        write_records_csv(path, self.records)


def join(
    refs: Iterable[Sample], preds: Iterable[tuple[str, str]]
) -> tuple[list[tuple[Sample, str | None]], int, int]:
    """Pair each reference with its prediction text.

    Returns the pairs (sorted by sample id), the number of predictions and
    the number of predictions that match no reference.

    Raises:
        DuplicatePredictionId: a sample id occurs twice among predictions.
        SampleIdMismatch: a sample id occurs twice among references.
    """
    by_id: dict[str, str] = {}
    n_preds = 0
    for sid, text in preds:
        if sid in by_id:
            raise DuplicatePredictionId(f"duplicate prediction for sample {sid!r}")
        by_id[sid] = text
        n_preds += 1
    pairs = []
    seen: set[str] = set()
    for s in refs:
        if s.sample_id in seen:
            raise SampleIdMismatch(f"duplicate reference sample {s.sample_id!r}")
        seen.add(s.sample_id)
        pairs.append((s, by_id.get(s.sample_id)))
    pairs.sort(key=lambda p: p[0].sample_id)
    orphans = sum(1 for sid in by_id if sid not in seen)
    return pairs, n_preds, orphans


def evaluate(
    refs: Iterable[Sample],
    preds: Iterable[tuple[str, str]],
    cfg: EvalConfig | None = None,
    workers: int = 1,
) -> Evaluation:
    """Score predictions against references and build the report.

    References without a prediction are scored as Unknown label, no box and
    zero text overlap. ``workers > 1`` scores shards in separate processes;
    the result is identical to the single-process run.
    """
    cfg = cfg or EvalConfig()
    with _gc_paused():
        pairs, n_preds, orphans = join(refs, preds)
        if workers <= 1 or len(pairs) < 2:
            acc = _score_shard((pairs, cfg))
        else:
            acc = Accumulator(cfg.digest)
            for part in _score_parallel(pairs, cfg, workers):
                acc = merge(acc, part)
        report = finalize(acc, cfg, n_preds, orphans)
        records = [acc.records[k] for k in sorted(acc.records)]
    return Evaluation(report, records)


def write_records_csv(path, records: Iterable[SampleRecord]) -> None:
    with open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow(r.csv_row())


def _decode_prediction(d: dict) -> tuple[str, str]:
    sid, text = d["sample_id"], d["prediction_text"]
    if not isinstance(text, str):
        raise ValueError("prediction_text must be a string")
    return str(sid), text


def read_predictions(path, meta: dict | None = None) -> Iterator[tuple[str, str]]:
    for _, rec in iter_jsonl(path, _decode_prediction, meta):
        yield rec


def read_samples(path, meta: dict | None = None) -> Iterator[Sample]:
    for _, rec in iter_jsonl(path, Sample.from_dict, meta):
        yield rec
