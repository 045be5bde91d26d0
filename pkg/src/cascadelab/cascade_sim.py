"""Monte Carlo simulation of one- and two-stage ranking selection.

Each trial draws n true values from N(mu, sigma^2); stage scores add
independent Gaussian errors. The first stage keeps its top k1, the second
its top k2 of those. Calibration ratios are computed on the stage-1
selected set S1:

    cal(i, j) = mean of stage-i scores on S1 / mean of stage-j scores on S1

with stage 0 denoting the ground truth. Even when every stage is unbiased
on the full pool, stage 1 is over-calibrated on its own selection while a
stage with independent errors stays calibrated there; these simulations
quantify that gap as a function of k1 and the noise levels.

Ratios are aggregated as ratio-of-grand-means over all trials (that is
what the mean-score definition denotes); standard errors come from a
nonparametric bootstrap over trials. Every trial has its own named
randomness substream, so results are identical however trials are batched
or parallelized.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DegenerateDataError
from .order_stats import GaussianRankingSpec, expected_topk_sum
from .rng import substream

_BOOTSTRAP_RESAMPLES = 200
_TRIAL_CHUNK = 512


@dataclass(frozen=True)
class TwoStageSpec:
    n: int
    k1: int
    k2: int
    mu: float
    sigma: float
    sigma1: float
    sigma2: float
    trials: int
    seed: int

    def __post_init__(self) -> None:
        if not (1 <= self.k2 <= self.k1 <= self.n):
            raise ConfigError(
                f"need 1 <= k2 <= k1 <= n, got k2={self.k2}, k1={self.k1}, n={self.n}"
            )
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.sigma < 0 or self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigError("standard deviations must be >= 0")


@dataclass(frozen=True)
class OneStageReport:
    """Rank-wise means over trials for a single selection stage."""

    spec: GaussianRankingSpec
    k: int
    trials: int
    mean_predicted: np.ndarray  # (k,) mean predicted score at each rank
    mean_true: np.ndarray  # (k,) mean true value at each rank
    total_predicted: float
    total_true: float
    stderr_total_predicted: float
    stderr_total_true: float


@dataclass(frozen=True)
class CalibrationEstimate:
    cal_1_2: float
    cal_1_0: float
    cal_2_0: float
    stderr_1_2: float
    stderr_1_0: float
    stderr_2_0: float
    mean_true_topk: float
    mean_pred_stage1: float
    mean_pred_stage2: float


@dataclass(frozen=True)
class CalibrationCurve:
    sweep_name: str
    sweep_values: tuple[float, ...]
    estimates: tuple[CalibrationEstimate, ...]

    def __post_init__(self) -> None:
        if len(self.sweep_values) != len(self.estimates):
            raise ConfigError("sweep_values and estimates must have equal length")
        if any(b <= a for a, b in zip(self.sweep_values, self.sweep_values[1:])):
            raise ConfigError("sweep_values must be strictly increasing")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("sweep_value,cal_1_2,cal_1_0,cal_2_0,stderr_1_2,stderr_1_0,stderr_2_0\n")
        for v, e in zip(self.sweep_values, self.estimates):
            fields = (v, e.cal_1_2, e.cal_1_0, e.cal_2_0, e.stderr_1_2, e.stderr_1_0, e.stderr_2_0)
            buf.write(",".join(f"{x:.6g}" for x in fields) + "\n")
        return buf.getvalue()


def _trial_normals(seed: int, trial: int, n: int, count: int) -> np.ndarray:
    """(count, n) standard normals for one trial's private substream."""
    return substream(seed, "trial", trial).standard_normal((count, n))


def simulate_one_stage(
    spec: GaussianRankingSpec, k: int, trials: int, seed: int
) -> OneStageReport:
    """Select top-k of n by noisy score per trial; report rank-wise means."""
    if not (1 <= k <= spec.n):
        raise ConfigError(f"k must be in [1, n={spec.n}], got {k}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")

    pred_sum = np.zeros(k)
    true_sum = np.zeros(k)
    tot_pred = np.zeros(trials)
    tot_true = np.zeros(trials)
    for t in range(trials):
        z = _trial_normals(seed, t, spec.n, 2)
        truth = spec.mu + spec.sigma * z[0]
        pred = truth + spec.sigma_model * z[1]
        order = np.argsort(-pred, kind="stable")[:k]
        p, y = pred[order], truth[order]
        pred_sum += p
        true_sum += y
        tot_pred[t] = p.sum()
        tot_true[t] = y.sum()

    root_t = np.sqrt(trials)
    return OneStageReport(
        spec=spec,
        k=k,
        trials=trials,
        mean_predicted=pred_sum / trials,
        mean_true=true_sum / trials,
        total_predicted=float(tot_pred.mean()),
        total_true=float(tot_true.mean()),
        stderr_total_predicted=float(tot_pred.std(ddof=1) / root_t) if trials > 1 else 0.0,
        stderr_total_true=float(tot_true.std(ddof=1) / root_t) if trials > 1 else 0.0,
    )


def _stage1_sums(spec: TwoStageSpec) -> np.ndarray:
    """(trials, 3) per-trial sums over S1 of stage-1 scores, stage-2 scores, truths."""
    sums = np.empty((spec.trials, 3))
    for t in range(spec.trials):
        z = _trial_normals(spec.seed, t, spec.n, 3)
        truth = spec.mu + spec.sigma * z[0]
        s1 = truth + spec.sigma1 * z[1]
        s2 = truth + spec.sigma2 * z[2]
        top = np.argsort(-s1, kind="stable")[: spec.k1]
        sums[t, 0] = s1[top].sum()
        sums[t, 1] = s2[top].sum()
        sums[t, 2] = truth[top].sum()
    return sums


def _ratios(sums: np.ndarray) -> tuple[float, float, float]:
    m1, m2, m0 = sums.mean(axis=0)
    for name, denom in (("stage-2 mean", m2), ("true mean", m0)):
        if abs(denom) < 1e-12:
            raise DegenerateDataError(
                f"{name} on S1 is {denom}; calibration ratios are undefined "
                "(choose mu/sigma keeping scores away from zero)"
            )
    return float(m1 / m2), float(m1 / m0), float(m2 / m0)


def simulate_two_stage(spec: TwoStageSpec) -> CalibrationEstimate:
    """Calibration ratios of Eq-style mean scores on S1, with bootstrap errors."""
    sums = _stage1_sums(spec)
    cal_1_2, cal_1_0, cal_2_0 = _ratios(sums)

    boot = substream(spec.seed, "bootstrap")
    resampled = np.empty((_BOOTSTRAP_RESAMPLES, 3))
    for b in range(_BOOTSTRAP_RESAMPLES):
        idx = boot.integers(0, spec.trials, size=spec.trials)
        resampled[b] = _ratios(sums[idx])
    err = resampled.std(axis=0, ddof=1)

    denom = spec.trials * spec.k1
    return CalibrationEstimate(
        cal_1_2=cal_1_2,
        cal_1_0=cal_1_0,
        cal_2_0=cal_2_0,
        stderr_1_2=float(err[0]),
        stderr_1_0=float(err[1]),
        stderr_2_0=float(err[2]),
        mean_true_topk=float(sums[:, 2].sum() / denom),
        mean_pred_stage1=float(sums[:, 0].sum() / denom),
        mean_pred_stage2=float(sums[:, 1].sum() / denom),
    )


_SWEEPABLE = ("k1", "sigma1", "sigma2")


def sweep_two_stage(
    base: TwoStageSpec, sweep_name: str, sweep_values: tuple[float, ...] | list[float]
) -> CalibrationCurve:
    """One estimate per sweep value, sharing per-trial substreams across points."""
    if sweep_name not in _SWEEPABLE:
        raise ConfigError(f"sweep_name must be one of {_SWEEPABLE}, got {sweep_name!r}")
    estimates = []
    for v in sweep_values:
        value = int(v) if sweep_name == "k1" else float(v)
        try:
            estimates.append(simulate_two_stage(replace(base, **{sweep_name: value})))
        except (ConfigError, DegenerateDataError) as exc:
            raise type(exc)(f"at sweep point {sweep_name}={v}: {exc}") from exc
    return CalibrationCurve(
        sweep_name=sweep_name,
        sweep_values=tuple(float(v) for v in sweep_values),
        estimates=tuple(estimates),
    )


def expected_stage1_total(spec: TwoStageSpec) -> float:
    """Analytic expected sum of stage-1 scores on S1 (order-stats cross-check)."""
    return expected_topk_sum(
        GaussianRankingSpec(n=spec.n, mu=spec.mu, sigma=spec.sigma, sigma_model=spec.sigma1),
        spec.k1,
    )
