"""Command-line front end.

Subcommands::

    tracebench synth    --patients N --seed S [--dist w:i:s] [--out studies.jsonl]
    tracebench build    [--studies studies.jsonl] [--splits splits.csv] --out DIR
    tracebench stats    --refs samples.jsonl [--out stats.json]
    tracebench baseline --refs samples.jsonl --strategy {stable-only,echo,jitter} [--out preds.jsonl]
    tracebench evaluate --refs samples.jsonl --preds preds.jsonl [--out report.json] [--csv per_sample.csv]

Paths default to ``-`` (stdin/stdout) where streaming makes sense, so
``tracebench synth | tracebench build --out corpus/`` works. Exit status is 0
on success, 1 for bad input or usage, 2 for an internal error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .baselines import BaselineSpec, Strategy, iter_predictions
from .corpus import (
    SPLITS,
    DistributionStats,
    StudyRecord,
    SynthConfig,
    assign_splits,
    iter_pairs_streaming,
    iter_samples,
    iter_synth_corpus,
)
from .engine import EvalConfig, evaluate, read_predictions, read_samples, write_records_csv
from .errors import DuplicateStudyOrder, TraceBenchError, UnassignedPatient, UnsortedInput
from .grammar import LABELS, LEXICON_ENV, Lexicon
from .io import META_KEY, dumps, iter_jsonl, read_split_csv, write_json, write_jsonl, write_split_csv

log = logging.getLogger("tracebench")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INTERNAL = 2

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


class UsageError(TraceBenchError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for internal failures here
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument types


def _probability_triple(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected w:i:s, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise argparse.ArgumentTypeError(f"non-numeric entry in {text!r}") from None


def _int_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None


def _open_unit(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


# ---------------------------------------------------------------------------
# artifact metadata


def _meta(subcommand: str, config: dict, upstream: dict | None = None) -> dict:
    meta = {"tool": "tracebench", "version": __version__, "subcommand": subcommand, "config": config}
    if upstream:
        meta["upstream"] = upstream
    return meta


def _write_sidecar(path: str | Path, meta: dict) -> None:
    """Metadata for formats without room for it inline (CSV)."""
    if str(path) != "-":
        write_json(f"{path}.meta.json", meta)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        n_patients=args.patients,
        studies_per_patient=args.studies_per_patient,
        annotations_per_study=args.annotations_per_study,
        label_distribution=args.dist,
        seed=args.seed,
    )
    cfg.validate()
    meta = _meta("synth", cfg.to_dict())
    pids: dict[str, None] = {}

    def records():
        for study in iter_synth_corpus(cfg):
            pids[study.patient_id] = None
            yield study.to_dict()

    n = write_jsonl(args.out, records(), meta)
    if args.splits_out:
        write_split_csv(args.splits_out, assign_splits(pids, SPLIT_FRACTIONS, seed=args.seed))
        _write_sidecar(
            args.splits_out,
            _meta("synth", {**cfg.to_dict(), "split_fractions": list(SPLIT_FRACTIONS)}),
        )
    log.info("wrote %d study records", n)
    return EXIT_OK


def _table(stats: dict[str, DistributionStats]) -> list[dict]:
    """Samples row plus one percentage row per change label, one column per split."""
    rows = [{"row": "samples", **{k: v.n_samples for k, v in stats.items()}}]
    for lab in LABELS:
        rows.append(
            {"row": lab.value, **{k: round(100 * v.fractions[lab.value], 1) for k, v in stats.items()}}
        )
    return rows


def cmd_build(args: argparse.Namespace) -> int:
    assignment = read_split_csv(args.splits) if args.splits else None
    out_dir = Path(args.out)
    upstream: dict = {}
    where = [0]

    def tracked():
        for line_no, rec in iter_jsonl(args.studies, StudyRecord.from_dict, upstream):
            where[0] = line_no
            yield rec

    studies = tracked()
    # read one record up front so the upstream meta line is known before writing ours
    head = next(studies, None)
    config = {
        "studies": str(args.studies),
        "splits": str(args.splits) if args.splits else None,
        "unassigned_policy": "error" if assignment is not None else "all patients to test",
    }
    meta = _meta("build", config, upstream or None)
    stats = {s: DistributionStats() for s in SPLITS}
    patients: dict[str, set[str]] = {s: set() for s in SPLITS}
    skipped: list[dict] = []

    def all_studies():
        if head is not None:
            yield head
            yield from studies

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        handles = {s: open(out_dir / f"{s}.jsonl", "w", encoding="utf-8") for s in SPLITS}
    except OSError as exc:
        raise TraceBenchError(f"{out_dir}: {exc.strerror or exc}") from None
    try:
        for split, fh in handles.items():
            fh.write(dumps({META_KEY: {**meta, "split": split}}) + "\n")
        for sample in iter_samples(iter_pairs_streaming(all_studies()), skipped):
            if assignment is None:
                split = "test"
            elif sample.patient_id in assignment:
                split = assignment[sample.patient_id]
            else:
                raise UnassignedPatient(f"patient {sample.patient_id!r} is missing from {args.splits}")
            sample = replace(sample, split=split)
            handles[split].write(dumps(sample.to_dict()) + "\n")
            stats[split].add(sample)
            patients[split].add(sample.patient_id)
    except (UnsortedInput, DuplicateStudyOrder) as exc:
        name = "<stdin>" if str(args.studies) == "-" else str(args.studies)
        raise TraceBenchError(f"{name}:{where[0]}: {exc}") from None
    finally:
        for fh in handles.values():
            fh.close()

    summary = {
        **meta,
        "splits": {s: {**stats[s].to_dict(), "n_patients": len(patients[s])} for s in SPLITS},
        "table": _table(stats),
        "n_skipped_annotations": len(skipped),
        "skipped_annotations": skipped,
    }
    write_json(out_dir / "stats.json", summary)
    for s in SPLITS:
        if assignment is not None and stats[s].empty:
            log.warning("split %s is empty", s)
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    upstream: dict = {}
    stats = DistributionStats()
    for sample in read_samples(args.refs, upstream):
        stats.add(sample)
    if stats.empty:
        log.warning("%s holds no samples", args.refs)
    write_json(args.out, {**_meta("stats", {"refs": str(args.refs)}, upstream or None), **stats.to_dict()})
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    spec = BaselineSpec(Strategy(args.strategy), args.noise, args.seed, args.no_box)
    upstream: dict = {}
    refs = read_samples(args.refs, upstream)
    # pull the first sample so the reference header is known before writing ours
    first = next(refs, None)
    if first is None:
        raise UsageError(f"{args.refs}: no reference samples")
    meta = _meta("baseline", {**spec.to_dict(), "refs": str(args.refs)}, upstream or None)

    def chain():
        yield first
        yield from refs

    write_jsonl(args.out, iter_predictions(spec, chain()), meta)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    lexicon = Lexicon.from_env()
    cfg = EvalConfig(args.iou_threshold, args.min_anatomy_support, lexicon)
    refs_meta: dict = {}
    preds_meta: dict = {}
    refs = list(read_samples(args.refs, refs_meta))
    if not refs:
        raise UsageError(f"{args.refs}: no reference samples")
    preds = list(read_predictions(args.preds, preds_meta))
    result = evaluate(refs, preds, cfg, workers=args.workers)
    report = result.report.to_dict()
    # worker count is deliberately absent: the report is identical for any value
    report["inputs"] = {
        "refs": str(args.refs),
        "preds": str(args.preds),
        "refs_meta": refs_meta or None,
        "preds_meta": preds_meta or None,
        "lexicon_file": os.environ.get(LEXICON_ENV) or None,
    }
    write_json(args.out, report)
    if args.csv:
        write_records_csv(args.csv, result.records)
        _write_sidecar(args.csv, _meta("evaluate", report["config"]))
    n = report["counts"]
    if n["n_unmatched"]:
        log.warning("%d reference samples had no prediction (scored as worst case)", n["n_unmatched"])
    if n["n_orphan_preds"]:
        log.warning("%d predictions match no reference sample", n["n_orphan_preds"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tracebench", description="Grounded temporal report benchmark tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic study records (JSONL)")
    p.add_argument("--patients", type=int, default=1000, help="number of synthetic patients")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--dist", type=_probability_triple, default=(0.345, 0.217, 0.438),
                   help="change label probabilities worsened:improved:stable")
    p.add_argument("--studies-per-patient", type=_int_range, default=(1, 5), metavar="LO:HI",
                   help="inclusive range of studies per patient")
    p.add_argument("--annotations-per-study", type=_int_range, default=(0, 4), metavar="LO:HI",
                   help="inclusive range of annotations per study")
    p.add_argument("--out", default="-", help="output JSONL (default stdout)")
    p.add_argument("--splits-out", help="also write a random 70/10/20 patient split CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="study records + split CSV -> per-split sample JSONL")
    p.add_argument("--studies", default="-", help="study JSONL sorted by patient_id (default stdin)")
    p.add_argument("--splits", help="patient_id,split CSV; without it every patient goes to test")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("stats", help="label and anatomy distribution of a sample JSONL")
    p.add_argument("--refs", required=True, help="sample JSONL")
    p.add_argument("--out", default="-", help="stats JSON (default stdout)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("baseline", help="write baseline predictions for reference samples")
    p.add_argument("--refs", required=True, help="sample JSONL to predict for")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], required=True)
    p.add_argument("--noise", type=_non_negative_float, default=0.0, help="jitter noise scale")
    p.add_argument("--seed", type=int, default=0, help="jitter seed")
    p.add_argument("--no-box", action="store_true", help="stable-only without box tokens")
    p.add_argument("--out", default="-", help="prediction JSONL (default stdout)")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--refs", required=True, help="reference sample JSONL")
    p.add_argument("--preds", required=True, help="prediction JSONL (sample_id, prediction_text)")
    p.add_argument("--out", default="-", help="report JSON (default stdout)")
    p.add_argument("--csv", help="per-sample score CSV")
    p.add_argument("--iou-threshold", type=_open_unit, default=0.5,
                   help="IoU strictly above this is a hit (default 0.5)")
    p.add_argument("--min-anatomy-support", type=_positive_int, default=1,
                   help="regions with fewer samples pool into 'other' (default 1)")
    p.add_argument("--workers", type=_positive_int, default=1, help="scoring processes (default 1)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.WARNING,
        format="tracebench: %(levelname)s: %(message)s",
    )
    try:
        return args.func(args)
    except TraceBenchError as exc:
        print(f"tracebench: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BrokenPipeError:
        # downstream closed early (e.g. `| head`); not our failure
        sys.stderr.close()
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001
        traceback.print_exc()
        print(f"tracebench: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
