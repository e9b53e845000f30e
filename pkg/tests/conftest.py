from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from tracebench.corpus import SynthConfig, emit_samples, iter_pairs_streaming, iter_synth_corpus
from tracebench.grammar import ANATOMY_REGIONS, LABELS, BoundingBox, GroundedFinding

settings.register_profile(
    "default", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Finding words carry no change cue and none of the words that end an anatomy span.
FINDING_WORDS = (
    "pneumothorax", "pleural effusion", "opacity", "atelectasis", "consolidation",
    "edema", "cardiomegaly", "nodule", "lung opacity", "vascular congestion",
    "enlarged cardiac silhouette", "hilar prominence", "mass", "scarring",
)


@st.composite
def boxes(draw, grid: int = 1000) -> BoundingBox:
    """Valid boxes on a 1/grid lattice, so 3-decimal quantization is exact."""
    x1 = draw(st.integers(0, grid - 1))
    x2 = draw(st.integers(x1 + 1, grid))
    y1 = draw(st.integers(0, grid - 1))
    y2 = draw(st.integers(y1 + 1, grid))
    return BoundingBox(x1 / grid, y1 / grid, x2 / grid, y2 / grid)


@st.composite
def float_boxes(draw) -> BoundingBox:
    """Valid boxes with arbitrary float coordinates whose quantization stays valid."""
    xs = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    ys = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2)))
    if round(xs[1] - xs[0], 3) < 0.002 or round(ys[1] - ys[0], 3) < 0.002:
        xs, ys = [0.1, 0.5], [0.2, 0.6]
    return BoundingBox(xs[0], ys[0], xs[1], ys[1])


@st.composite
def findings(draw, box_strategy=None) -> GroundedFinding:
    return GroundedFinding(
        draw(st.sampled_from(FINDING_WORDS)),
        draw(st.sampled_from(LABELS)),
        draw(box_strategy if box_strategy is not None else boxes()),
        draw(st.sampled_from(ANATOMY_REGIONS)),
    )


@pytest.fixture
def paper_finding() -> GroundedFinding:
    return GroundedFinding(
        "pneumothorax", "worsened", BoundingBox(0.196, 0.107, 0.522, 0.634), "right lung"
    )


def synth_samples(n_patients: int = 300, seed: int = 0, **kwargs):
    """Samples from a synthetic corpus drawn with the test-split label mix."""
    cfg = SynthConfig(n_patients=n_patients, seed=seed, **kwargs)
    return emit_samples(iter_pairs_streaming(iter_synth_corpus(cfg)))


@pytest.fixture(scope="session")
def small_corpus():
    return synth_samples(300, seed=11)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
