from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracebench.detection import (
    OTHER,
    UNKNOWN,
    ConfusionMatrix3,
    SampleScore,
    confusion,
    grounding_stats,
    iou,
    per_anatomy_accuracy,
    per_class_metrics,
    score_sample,
    select_finding,
)
from tracebench.errors import SampleIdMismatch
from tracebench.grammar import BoundingBox, ChangeLabel, GroundedFinding, parse_report, serialize_finding

from .conftest import boxes
from .oracles import raster_iou, random_lattice_box

W, I, S = ChangeLabel.WORSENED, ChangeLabel.IMPROVED, ChangeLabel.STABLE


# --- IoU -----------------------------------------------------------------------------


def test_iou_examples():
    a = BoundingBox(0.1, 0.2, 0.6, 0.7)
    assert iou(a, a) == 1.0
    assert iou(BoundingBox(0, 0, 0.4, 0.4), BoundingBox(0.5, 0.5, 1, 1)) == 0.0
    assert abs(iou(BoundingBox(0, 0, 0.5, 0.5), BoundingBox(0.25, 0.25, 0.75, 0.75)) - 1 / 7) < 1e-9
    # touching edges share no area
    assert iou(BoundingBox(0, 0, 0.5, 0.5), BoundingBox(0.5, 0, 1, 0.5)) == 0.0


def test_iou_matches_raster_oracle():
    rng = random.Random(2024)
    worst = 0.0
    for k in range(1000):
        a = random_lattice_box(rng)
        b = random_lattice_box(rng, near=a if k % 4 else None)
        worst = max(worst, abs(iou(a, b) - raster_iou(a, b)))
    assert worst <= 1e-3


def test_raster_oracle_sanity():
    assert abs(raster_iou(BoundingBox(0, 0, 0.5, 0.5), BoundingBox(0.25, 0.25, 0.75, 0.75)) - 1 / 7) < 1e-12


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == 1.0


@given(boxes(), st.data())
def test_iou_containment(outer, data):
    x1 = data.draw(st.floats(outer.x1, outer.x2))
    x2 = data.draw(st.floats(x1, outer.x2))
    y1 = data.draw(st.floats(outer.y1, outer.y2))
    y2 = data.draw(st.floats(y1, outer.y2))
    if not (x1 < x2 and y1 < y2):
        return
    inner = BoundingBox(x1, y1, x2, y2)
    assert abs(iou(inner, outer) - inner.area / outer.area) <= 1e-9


# --- matching / score_sample ---------------------------------------------------------------

REF = GroundedFinding("pneumothorax", W, BoundingBox(0.2, 0.1, 0.5, 0.6), "right lung")


def _f(finding, anatomy, box=(0.6, 0.6, 0.9, 0.9), change=S):
    return GroundedFinding(finding, change, BoundingBox(*box), anatomy)


@pytest.mark.parametrize(
    "candidates, expected",
    [
        # same (anatomy, finding) beats same anatomy
        ([_f("edema", "right lung"), _f("pneumothorax", "right lung")], 1),
        # same anatomy beats higher IoU elsewhere
        ([_f("pneumothorax", "left lung", (0.2, 0.1, 0.5, 0.6)), _f("edema", "right lung")], 1),
        # no anatomy match: highest positive IoU
        ([_f("a", "spine", (0.0, 0.0, 0.05, 0.05)), _f("b", "spine", (0.3, 0.2, 0.5, 0.6)), _f("c", "spine", (0.2, 0.1, 0.3, 0.2))], 1),
        # nothing overlaps: first finding
        ([_f("a", "spine"), _f("b", "trachea")], 0),
        ([_f("only", "spine")], 0),
    ],
)
def test_select_finding_rule(candidates, expected):
    assert select_finding(candidates, REF) is candidates[expected]


def test_select_finding_empty():
    assert select_finding([], REF) is None


def test_score_exact_echo():
    s = score_sample(parse_report(serialize_finding(REF)), REF, "x")
    assert (s.pred_label, s.iou, s.correct, s.parse_errors) == (W, 1.0, True, 0)


def test_score_no_box_scores_label_from_text():
    s = score_sample(parse_report("Interval worsening of pneumothorax in right lung."), REF)
    assert s.pred_label is W and s.iou is None and s.correct


def test_score_two_findings_uses_anatomy_match():
    text = (
        "edema <box>0.700,0.700,0.900,0.900</box> in left lung is stable. "
        "Interval worsening of effusion <box>0.200,0.100,0.400,0.600</box> in right lung."
    )
    s = score_sample(parse_report(text), REF)
    assert s.pred_label is W
    assert abs(s.iou - (0.2 * 0.5) / (0.3 * 0.5)) < 1e-12


def test_score_box_without_cue():
    text = "There is pneumothorax <box>0.2,0.1,0.5,0.6</box> in right lung."
    s = score_sample(parse_report(text), REF)
    assert s.pred_label is None and s.iou == 1.0 and s.parse_errors == 1


def test_score_malformed_box_is_miss():
    s = score_sample(parse_report("Interval worsening of pneumothorax <box>0.5,0.1</box> in right lung."), REF)
    assert s.pred_label is W and s.iou is None and s.parse_errors == 1


def test_score_garbage():
    s = score_sample(parse_report("lorem ipsum"), REF)
    assert s.pred_label is None and s.iou is None and not s.correct


# --- confusion / per-class ------------------------------------------------------------------

TEST_COUNTS = {W: 7787, I: 4888, S: 9878}


def _stable_only_cm() -> ConfusionMatrix3:
    cm = ConfusionMatrix3()
    for lab, n in TEST_COUNTS.items():
        cm.add(lab, S, n)
    return cm


def test_stable_only_on_test_distribution():
    cm = _stable_only_cm()
    m = per_class_metrics(cm)
    assert cm.total == 22553 == m.total_support
    assert abs(cm.accuracy - 0.438) <= 0.0005
    assert m.per_class["stable"].recall == 1.0
    assert m.per_class["worsened"].recall == 0.0 and m.per_class["improved"].recall == 0.0
    assert m.per_class["worsened"].f1 == 0.0 and m.per_class["improved"].f1 == 0.0
    # hand value: stable F1 = 2p/(1+p) with p = 0.438, others 0
    assert abs(2 * 0.438 / 1.438 - 0.6092) < 1e-4
    assert abs(m.per_class["stable"].f1 - 0.6092) < 5e-4
    assert abs(m.macro_f1 - 0.2031) < 2e-4


def test_table4_supports_and_worsening_recall():
    assert sum(TEST_COUNTS.values()) == 22553
    cm = ConfusionMatrix3()
    cm.add(W, W, 2921)
    cm.add(W, S, 7787 - 2921)
    m = per_class_metrics(cm)
    assert m.per_class["worsened"].support == 7787
    assert round(m.per_class["worsened"].recall, 3) == 0.375
    assert m.per_class["worsened"].recall == 2921 / 7787


def test_perfect_predictions():
    cm = ConfusionMatrix3()
    for lab, n in TEST_COUNTS.items():
        cm.add(lab, lab, n)
    m = per_class_metrics(cm)
    assert cm.accuracy == 1.0
    assert all(c.precision == c.recall == c.f1 == 1.0 for c in m.per_class.values())
    assert m.macro_f1 == 1.0


def test_unknown_counts_as_wrong_everywhere():
    cm = confusion([("a", None), ("b", S)], [("a", S), ("b", S)])
    m = per_class_metrics(cm)
    assert cm.accuracy == 0.5
    assert cm.counts[2] == [0, 0, 1, 1]
    assert m.per_class["stable"].precision == 1.0 and m.per_class["stable"].recall == 0.5
    assert cm.to_dict()["columns"][-1] == UNKNOWN


def test_confusion_alignment():
    cm = confusion([("a", I), ("b", W)], [("a", I), ("b", S)])
    assert cm.counts[1][1] == 1 and cm.counts[2][0] == 1
    with pytest.raises(SampleIdMismatch):
        confusion([("b", W), ("a", I)], [("a", I), ("b", S)])
    with pytest.raises(SampleIdMismatch):
        confusion([("a", S)], [("b", S)])
    with pytest.raises(SampleIdMismatch):
        confusion([("a", S)], [("a", S), ("b", S)])


cm_entries = st.lists(st.integers(0, 50), min_size=12, max_size=12)


@given(cm_entries)
def test_class_metric_properties(entries):
    cm = ConfusionMatrix3([entries[k * 4 : k * 4 + 4] for k in range(3)])
    m = per_class_metrics(cm)
    assert cm.total == sum(entries)
    assert 0.0 <= cm.accuracy <= 1.0
    assert sum(c.support for c in m.per_class.values()) == cm.total
    for c in m.per_class.values():
        assert 0 <= c.precision <= 1 and 0 <= c.recall <= 1 and 0 <= c.f1 <= 1
        expected = 2 * c.precision * c.recall / (c.precision + c.recall) if c.precision + c.recall else 0.0
        assert abs(c.f1 - expected) <= 1e-12
    assert m.macro_f1 <= max(c.f1 for c in m.per_class.values()) + 1e-12


@given(cm_entries, cm_entries)
def test_confusion_merge_and_dict_round_trip(a, b):
    ca = ConfusionMatrix3([a[k * 4 : k * 4 + 4] for k in range(3)])
    cb = ConfusionMatrix3([b[k * 4 : k * 4 + 4] for k in range(3)])
    merged = ca.merge(cb)
    assert merged.total == ca.total + cb.total
    assert ConfusionMatrix3.from_dict(merged.to_dict()) == merged


# --- grounding ------------------------------------------------------------------------------


def test_grounding_examples():
    g = grounding_stats([1.0] * 5)
    assert (g.mean_iou, g.hit_rate) == (1.0, 1.0)
    g = grounding_stats([0.4, 0.6], 0.5)
    assert (g.mean_iou, g.hit_rate) == (0.5, 0.5)


def test_grounding_strict_threshold_and_missing_boxes():
    g = grounding_stats([0.5, 0.75, None, None], 0.5)
    assert g.n_hits == 1  # 0.5 is not > 0.5
    assert g.mean_iou == 0.625 and g.n_with_box == 2 and g.n_scored == 4
    assert g.hit_rate == 0.25 and g.hit_rate_boxed == 0.5


def test_grounding_empty_and_threshold_validation():
    g = grounding_stats([])
    assert g.mean_iou == 0.0 and g.hit_rate == 0.0 and g.n_scored == 0
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            grounding_stats([0.5], bad)


# --- per-anatomy ----------------------------------------------------------------------------


def _scores(rows):
    out = []
    for k, (anatomy, correct) in enumerate(rows):
        out.append(SampleScore(str(k), S, S if correct else W, 1.0, anatomy))
    return out


def test_single_anatomy_row_equals_overall():
    rows = [("right lung", k % 3 == 0) for k in range(30)]
    (row,) = per_anatomy_accuracy(_scores(rows))
    assert row.anatomy == "right lung" and row.support == 30 and row.accuracy == 10 / 30


def test_table6_structure_partitions_corpus():
    supports = {"mediastinum": 339, "cardiac silhouette": 1868, "right hilar": 60, "right lung": 17343, "left lung": 2549}
    rare = {f"region{k}": 394 // 8 + (k < 394 % 8) for k in range(8)}
    tally = {k: (0, v) for k, v in {**supports, **rare}.items()}
    rows = per_anatomy_accuracy(tally, min_support=60)
    assert [r.anatomy for r in rows][-1] == OTHER
    assert rows[-1].support == 394
    assert sum(r.support for r in rows) == 22553
    assert {r.anatomy: r.support for r in rows[:-1]} == supports


def test_per_anatomy_sorted_by_accuracy():
    rows = per_anatomy_accuracy(_scores([("a", True), ("b", False), ("b", True), ("c", False)]))
    assert [r.anatomy for r in rows] == ["a", "b", "c"]
    assert [r.accuracy for r in rows] == [1.0, 0.5, 0.0]


@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c", "d", "other"]), st.booleans())), st.integers(1, 6))
def test_per_anatomy_partition_property(rows, min_support):
    table = per_anatomy_accuracy(_scores(rows), min_support)
    assert sum(r.support for r in table) == len(rows)
    assert sum(r.correct for r in table) == sum(c for _, c in rows)
    assert len({r.anatomy for r in table}) == len(table)
    named = [r for r in table if r.anatomy != OTHER]
    assert [r.accuracy for r in named] == sorted((r.accuracy for r in named), reverse=True)
