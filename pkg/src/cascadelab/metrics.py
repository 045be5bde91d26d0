"""Evaluation metrics: normalized entropy and calibration ratios.

Normalized entropy (NE) is the total cross entropy of the predictions
divided by the cross entropy of the constant base-rate predictor; 1.0
means no information beyond the base rate and smaller is better. Targets
may be hard labels or a reference model's predictions (the standard way
to score cross-stage consistency on data that never received real
feedback), in which case the base rate is the mean reference prediction.

Calibration is the ratio of mean predictions of a test model over mean
predictions of a reference model or mean ground-truth labels; 1.0 is
ideal, above 1.0 means the test model over-predicts on the evaluated set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DegenerateDataError, DimensionError
from .predictor import PRED_EPS


@dataclass(frozen=True)
class NEReport:
    ne: float
    num_examples: int
    target_kind: str  # "ground_truth" | "teacher_prediction"
    ne_relative_change_pct: float | None = None

    def vs_baseline(self, baseline: "NEReport") -> "NEReport":
        return NEReport(
            ne=self.ne,
            num_examples=self.num_examples,
            target_kind=self.target_kind,
            ne_relative_change_pct=relative_change(self.ne, baseline.ne),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "ne": self.ne,
                "ne_relative_change_pct": self.ne_relative_change_pct,
                "n": self.num_examples,
                "target_kind": self.target_kind,
            },
            sort_keys=True,
        )


@dataclass(frozen=True)
class CalibrationReport:
    ratio: float
    numerator_mean: float
    denominator_mean: float
    reference_kind: str  # "ground_truth" | "reference_model"

    def to_json(self) -> str:
        payload = asdict(self)
        payload["calibration_ratio"] = payload.pop("ratio")
        return json.dumps(payload, sort_keys=True)


def _aligned(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 1:
        raise DimensionError("inputs must be equal-length 1-d sequences with >= 1 entries")
    return x, y


def normalized_entropy(
    targets, predictions, target_kind: str = "ground_truth"
) -> NEReport:
    """Sum of per-example BCE over the BCE of the base-rate constant predictor."""
    y, p = _aligned(targets, predictions)
    base = float(y.mean())
    if base <= 0.0 or base >= 1.0:
        raise DegenerateDataError(
            f"base rate {base} leaves the constant predictor with zero entropy"
        )
    p = np.clip(p, PRED_EPS, 1.0 - PRED_EPS)
    numer = float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum())
    denom = float(-(y * math.log(base) + (1.0 - y) * math.log(1.0 - base)).sum())
    return NEReport(ne=numer / denom, num_examples=y.size, target_kind=target_kind)


def calibration_ratio(
    test_predictions, reference, reference_kind: str = "reference_model"
) -> CalibrationReport:
    """Ratio of mean test predictions over mean reference values."""
    test, ref = _aligned(test_predictions, reference)
    num = float(test.mean())
    den = float(ref.mean())
    if den == 0.0:
        raise DegenerateDataError("reference mean is zero; calibration ratio undefined")
    return CalibrationReport(
        ratio=num / den,
        numerator_mean=num,
        denominator_mean=den,
        reference_kind=reference_kind,
    )


def relative_change(candidate: float, baseline: float) -> float:
    """Signed percentage change vs a baseline; negative NE change is an improvement."""
    if baseline == 0.0:
        raise DegenerateDataError("relative change against a zero baseline is undefined")
    return 100.0 * (candidate - baseline) / baseline
