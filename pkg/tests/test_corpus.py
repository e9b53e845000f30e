from __future__ import annotations

import json
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracebench.corpus import (
    SPLITS,
    TEST_LABEL_DISTRIBUTION,
    Annotation,
    Sample,
    StudyRecord,
    SynthConfig,
    assign_splits,
    build_pairs,
    corpus_stats,
    emit_samples,
    iter_pairs_streaming,
    split_corpus,
    synth_corpus,
)
from tracebench.errors import (
    DuplicateStudyOrder,
    InvalidDistribution,
    UnassignedPatient,
    UnsortedInput,
)
from tracebench.grammar import BoundingBox, ChangeLabel, GroundedFinding, parse_report

W, I, S = ChangeLabel.WORSENED, ChangeLabel.IMPROVED, ChangeLabel.STABLE


def study(pid: str, order: int, n_ann: int = 1, box=(100, 100, 400, 500)) -> StudyRecord:
    anns = tuple(Annotation("opacity", "right lung", S, box) for _ in range(n_ann))
    return StudyRecord(pid, f"{pid}-{order}", order, f"{pid}-{order}-img", 1000, 1000, anns)


def sample(sid: str, pid: str, label: ChangeLabel, anatomy: str = "right lung") -> Sample:
    ref = GroundedFinding("opacity", label, BoundingBox(0.1, 0.1, 0.5, 0.5), anatomy)
    return Sample(sid, pid, "prior", "cur", ref)


# --- build_pairs -------------------------------------------------------------


def test_pairs_immediate_predecessor():
    pairs = build_pairs([study("P", 3), study("P", 1), study("P", 2)])
    assert [(p.prior.study_order, p.current.study_order) for p in pairs] == [(1, 2), (2, 3)]


def test_single_study_has_no_pairs():
    assert build_pairs([study("Q", 1)]) == []


def test_pair_count_two_patients():
    studies = [study("P", 1), study("P", 2), study("Q", 5), study("Q", 7), study("Q", 9)]
    assert len(build_pairs(studies)) == 3


def test_duplicate_study_order():
    with pytest.raises(DuplicateStudyOrder):
        build_pairs([study("P", 1), study("P", 1)])


@given(st.dictionaries(st.sampled_from("ABCDEFG"), st.sets(st.integers(0, 50), max_size=8)))
def test_pair_count_identity(orders):
    studies = [study(p, o) for p, os in orders.items() for o in os]
    pairs = build_pairs(studies)
    assert len(pairs) == sum(max(0, len(os) - 1) for os in orders.values())
    for p in pairs:
        # the prior is the maximal order strictly below the current one
        below = [o for o in orders[p.patient_id] if o < p.current.study_order]
        assert p.prior.study_order == max(below)


def test_streaming_pairs_match_batch():
    studies = [study(p, o) for p in ("A", "B", "C") for o in (4, 1, 3)]
    assert list(iter_pairs_streaming(studies)) == build_pairs(studies)


def test_streaming_rejects_unsorted():
    with pytest.raises(UnsortedInput):
        list(iter_pairs_streaming([study("B", 1), study("B", 2), study("A", 1)]))


# --- emit_samples ----------------------------------------------------------------


def test_samples_per_annotation():
    pairs = build_pairs([study("P", 1), study("P", 2, n_ann=2)])
    assert len(emit_samples(pairs)) == 2


def test_pair_without_annotations_emits_nothing():
    assert emit_samples(build_pairs([study("P", 1), study("P", 2, n_ann=0)])) == []


def test_sample_count_over_pairs():
    studies = [study("P", 0), study("P", 1, 2), study("P", 2, 0), study("P", 3, 1)]
    samples = emit_samples(build_pairs(studies))
    assert len(samples) == 3
    assert [s.sample_id for s in samples] == ["P-1#0", "P-1#1", "P-3#0"]
    assert samples[0].prior_image_id == "P-0-img" and samples[0].current_image_id == "P-1-img"


def test_emit_normalizes_and_quantizes_boxes():
    (s,) = emit_samples(build_pairs([study("P", 1), study("P", 2, box=(100, 50, 612, 649))]))
    # pixel/1000, then the 3-decimal grid used in reference text
    assert s.reference.box.as_tuple() == (0.1, 0.05, 0.612, 0.649)
    assert parse_report(s.reference_text).findings == (s.reference,)


def test_degenerate_annotation_skipped_and_logged(caplog):
    cur = StudyRecord(
        "P", "P-2", 2, "img", 1000, 1000,
        (Annotation("opacity", "right lung", S, (10, 10, 10, 50)), Annotation("edema", "left lung", W, (1, 1, 50, 50))),
    )
    skipped: list[dict] = []
    samples = emit_samples(build_pairs([study("P", 1), cur]), skipped)
    assert [s.sample_id for s in samples] == ["P-2#1"]
    assert skipped == [
        {"patient_id": "P", "study_id": "P-2", "annotation_index": 0, "reason": skipped[0]["reason"]}
    ]
    assert "DegenerateBox" in skipped[0]["reason"]
    assert "skipping annotation" in caplog.text


def test_sample_json_round_trip():
    (s,) = emit_samples(build_pairs([study("P", 1), study("P", 2)]))
    d = json.loads(json.dumps(s.to_dict()))
    assert set(d) == {
        "sample_id", "patient_id", "prior_image_id", "current_image_id", "split", "reference_text", "reference",
    }
    assert set(d["reference"]) == {"finding", "anatomy", "change", "box"}
    assert Sample.from_dict(d) == s


def test_study_record_round_trip_and_validation():
    s = study("P", 1, 2)
    assert StudyRecord.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    bad = s.to_dict() | {"study_order": "1"}
    with pytest.raises(ValueError):
        StudyRecord.from_dict(bad)
    with pytest.raises(ValueError):
        StudyRecord.from_dict(s.to_dict() | {"image_width": 0})


# --- split_corpus ------------------------------------------------------------------


def test_split_two_patients():
    samples = [sample("a1", "A", S), sample("b1", "B", W), sample("a2", "A", I)]
    out = split_corpus(samples, {"A": "train", "B": "test"})
    assert [s.sample_id for s in out["train"]] == ["a1", "a2"]
    assert [s.sample_id for s in out["test"]] == ["b1"]
    assert out["val"] == []
    assert {s.split for s in out["train"]} == {"train"}


def test_split_empty_corpus():
    assert split_corpus([], {}) == {"train": [], "val": [], "test": []}


def test_split_unassigned():
    with pytest.raises(UnassignedPatient):
        split_corpus([sample("x", "Z", S)], {"A": "train"})


@given(
    st.lists(st.tuples(st.sampled_from("ABCDEFGHIJ"), st.sampled_from([W, I, S])), max_size=60),
    st.integers(0, 2**16),
)
def test_split_patient_disjoint(rows, seed):
    samples = [sample(f"s{k}", pid, lab) for k, (pid, lab) in enumerate(rows)]
    assignment = assign_splits(sorted({p for p, _ in rows}), seed=seed)
    out = split_corpus(samples, assignment)
    pats = {k: {s.patient_id for s in v} for k, v in out.items()}
    assert not pats["train"] & pats["val"] and not pats["train"] & pats["test"] and not pats["val"] & pats["test"]
    assert sum(len(v) for v in out.values()) == len(samples)


# --- corpus_stats -------------------------------------------------------------------


def test_stats_test_split_fractions():
    counts = {W: 7787, I: 4888, S: 9878}
    samples = [sample(f"{lab.value}{k}", "P", lab) for lab, n in counts.items() for k in range(n)]
    stats = corpus_stats(samples)
    assert stats.n_samples == 22553
    fr = stats.fractions
    for lab, expected in zip((W, I, S), TEST_LABEL_DISTRIBUTION):
        assert abs(fr[lab.value] - expected) <= 0.0005
    assert abs(sum(fr.values()) - 1.0) <= 1e-9


def test_stats_empty():
    stats = corpus_stats([])
    assert stats.n_samples == 0 and stats.empty
    assert stats.fractions == {"worsened": 0.0, "improved": 0.0, "stable": 0.0}
    assert stats.to_dict()["empty"] is True


def test_stats_all_stable():
    stats = corpus_stats([sample(str(k), "P", S) for k in range(10)])
    assert stats.fractions["stable"] == 1.0 and not stats.empty


@given(st.lists(st.tuples(st.sampled_from([W, I, S]), st.sampled_from(["right lung", "left lung", "spine"]))))
def test_stats_counts_sum(rows):
    stats = corpus_stats([sample(str(k), "P", lab, an) for k, (lab, an) in enumerate(rows)])
    assert sum(stats.label_counts.values()) == stats.n_samples == len(rows)
    assert sum(stats.anatomy_counts.values()) == len(rows)
    if rows:
        assert abs(sum(stats.fractions.values()) - 1.0) <= 1e-9


# --- synthetic corpora --------------------------------------------------------------------


def test_synth_deterministic():
    cfg = SynthConfig(n_patients=200, seed=42)
    a = [json.dumps(r.to_dict()) for r in synth_corpus(cfg)]
    b = [json.dumps(r.to_dict()) for r in synth_corpus(cfg)]
    assert a == b
    assert a != [json.dumps(r.to_dict()) for r in synth_corpus(SynthConfig(n_patients=200, seed=43))]


def test_synth_sorted_and_valid():
    studies = synth_corpus(SynthConfig(n_patients=150, seed=1))
    pids = [s.patient_id for s in studies]
    assert pids == sorted(pids)
    skipped: list[dict] = []
    samples = emit_samples(iter_pairs_streaming(studies), skipped)
    assert samples and not skipped


def test_synth_label_convergence():
    samples = emit_samples(build_pairs(synth_corpus(SynthConfig(n_patients=5200, seed=5))))
    assert len(samples) >= 20000
    fr = corpus_stats(samples).fractions
    for lab, p in zip((W, I, S), TEST_LABEL_DISTRIBUTION):
        assert abs(fr[lab.value] - p) <= 0.01


def test_synth_anatomy_conditioned_boxes():
    samples = emit_samples(build_pairs(synth_corpus(SynthConfig(n_patients=800, seed=3))))
    centre_x = {}
    for s in samples:
        b = s.reference.box
        centre_x.setdefault(s.reference.anatomy, []).append((b.x1 + b.x2) / 2)
    mean = {k: sum(v) / len(v) for k, v in centre_x.items()}
    # image left is patient right
    assert mean["right lung"] < 0.5 < mean["left lung"]


def test_synth_single_study_per_patient_yields_nothing():
    cfg = SynthConfig(n_patients=100, studies_per_patient=(1, 1), seed=0)
    assert emit_samples(build_pairs(synth_corpus(cfg))) == []


@pytest.mark.parametrize(
    "kwargs",
    [
        {"label_distribution": (0.5, 0.5, 0.5)},
        {"label_distribution": (1.2, -0.2, 0.0)},
        {"label_distribution": (0.5, 0.5)},
        {"anatomy_distribution": {}},
        {"anatomy_distribution": {"left lung": 0.5, "right lung": 0.4}},
        {"anatomy_distribution": {"spleen": 1.0}},
        {"studies_per_patient": (3, 1)},
        {"label_distribution": (float("nan"), 0.5, 0.5)},
    ],
)
def test_synth_invalid_distribution(kwargs):
    with pytest.raises(InvalidDistribution):
        synth_corpus(SynthConfig(n_patients=5, **kwargs))


def test_assign_splits_fractions_and_determinism():
    pids = [f"p{k}" for k in range(20000)]
    a = assign_splits(pids, seed=9)
    assert a == assign_splits(pids, seed=9)
    c = Counter(a.values())
    assert set(c) == set(SPLITS)
    for split, frac in zip(SPLITS, (0.7, 0.1, 0.2)):
        assert abs(c[split] / len(pids) - frac) < 0.01
