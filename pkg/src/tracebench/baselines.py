"""Reference predictors for exercising the evaluation harness.

* ``stable-only``: every sample called stable, reference box copied. This
  is the collapse seen in models that never learned change detection.
* ``echo``: the serialized reference, verbatim. Upper bound on every metric.
* ``jitter``: echo with each box coordinate perturbed by uniform noise.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass
from typing import Iterable, Iterator

from .corpus import Sample
from .grammar import BoundingBox, ChangeLabel, GroundedFinding, format_coord, serialize_finding

MIN_EXTENT = 0.001


class Strategy(str, enum.Enum):
    STABLE_ONLY = "stable-only"
    ECHO = "echo"
    JITTER = "jitter"


@dataclass(frozen=True)
class BaselineSpec:
    strategy: Strategy = Strategy.ECHO
    noise_scale: float = 0.0
    seed: int = 0
    # stable-only without box tokens, as a model trained without grounding would answer
    no_box: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "noise_scale": self.noise_scale,
            "seed": self.seed,
            "no_box": self.no_box,
        }


def _q(v: float) -> float:
    return float(format_coord(v))


def _fit_axis(lo: float, hi: float) -> tuple[float, float]:
    lo, hi = _q(min(max(lo, 0.0), 1.0)), _q(min(max(hi, 0.0), 1.0))
    if lo > hi:
        lo, hi = hi, lo
    if hi - lo < MIN_EXTENT:
        mid = (lo + hi) / 2
        lo = _q(min(max(mid - MIN_EXTENT / 2, 0.0), 1.0 - MIN_EXTENT))
        hi = _q(lo + MIN_EXTENT)
    return lo, hi


def jitter_box(box: BoundingBox, noise_scale: float, rng: random.Random) -> BoundingBox:
    """Perturb each coordinate by U(-noise, +noise), then clamp to a valid 3-decimal box."""
    x1, y1, x2, y2 = (c + rng.uniform(-noise_scale, noise_scale) for c in box.as_tuple())
    x1, x2 = _fit_axis(x1, x2)
    y1, y2 = _fit_axis(y1, y2)
    return BoundingBox(x1, y1, x2, y2)


def predict_one(spec: BaselineSpec, sample: Sample) -> str:
    ref = sample.reference
    if spec.strategy is Strategy.STABLE_ONLY:
        if spec.no_box:
            return f"{ref.finding} in {ref.anatomy} is stable."
        return serialize_finding(GroundedFinding(ref.finding, ChangeLabel.STABLE, ref.box, ref.anatomy))
    if spec.strategy is Strategy.ECHO:
        return serialize_finding(ref)
    # per-sample stream keyed on sample_id: sharding or reordering can't change output
    rng = random.Random(f"{spec.seed}/{sample.sample_id}")
    box = jitter_box(ref.box, spec.noise_scale, rng)
    return serialize_finding(GroundedFinding(ref.finding, ref.change, box, ref.anatomy))


def iter_predictions(spec: BaselineSpec, refs: Iterable[Sample]) -> Iterator[dict]:
    for s in refs:
        yield {"sample_id": s.sample_id, "prediction_text": predict_one(spec, s)}


def predict(spec: BaselineSpec, refs: Iterable[Sample]) -> list[str]:
    """Prediction text for each reference sample, in input order."""
    refs = list(refs)
    if not refs:
        raise ValueError("no reference samples to predict for")
    return [predict_one(spec, s) for s in refs]
