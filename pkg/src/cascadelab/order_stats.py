"""Expected order statistics of Gaussian ranking scores.

For n candidates with true values ~ N(mu, sigma^2) and an unbiased scorer
whose predictions add independent N(0, sigma_model^2) noise, the expected
prediction at descending rank i (i = 1 is the largest) is approximated by
the Blom/Royston plotting-position formula

    mu + sqrt(sigma^2 + sigma_model^2) * inv_norm_cdf((n - i - a + 1) / (n - 2a + 1))

with a = 0.375. The widely reprinted value a = 3.375 makes the quantile
argument exceed 1 for the top ranks and is rejected by Monte Carlo; 0.375
is the default and the constant stays configurable for comparison.

Summing ranks 1..k with sigma_model = 0 gives the best achievable top-k
return; with sigma_model > 0 it gives the expected sum of *predicted*
scores of the selected items, which exceeds that optimum. The gap is the
over-calibration that selection induces in an unbiased scorer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, DomainError

BLOM_ALPHA = 0.375

# Rational minimax coefficients for the standard normal quantile
# (AS 241 PPND16 layout: central region plus two tail regions; relative
# accuracy ~1e-16, far beyond the 1e-12 CDF-space contract).
_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_B = (
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_D = (
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_F = (
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs: tuple[float, ...], x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def _quantile_lower_half(p: float) -> float:
    # p in (0, 0.5]; returns a value <= 0.
    q = p - 0.5
    if q >= -0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / (_poly(_B, r) * r + 1.0)
    r = math.sqrt(-math.log(p))
    if r <= 5.0:
        r -= 1.6
        return -_poly(_C, r) / (_poly(_D, r) * r + 1.0)
    r -= 5.0
    return -_poly(_E, r) / (_poly(_F, r) * r + 1.0)


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile: the z with Phi(z) = p.

    Raises DomainError outside the open interval (0, 1); never clamps.
    Built so that complements map to exact negations whenever 1 - p is
    exactly representable: inv_norm_cdf(1 - p) == -inv_norm_cdf(p).
    """
    if not (0.0 < p < 1.0) or math.isnan(p):
        raise DomainError(f"quantile argument must be in (0, 1), got {p!r}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -_quantile_lower_half(1.0 - p)
    return _quantile_lower_half(p)


@dataclass(frozen=True)
class GaussianRankingSpec:
    """Population of n candidates with N(mu, sigma^2) true values scored by
    an unbiased predictor with N(0, sigma_model^2) error."""

    n: int
    mu: float = 0.0
    sigma: float = 1.0
    sigma_model: float = 0.0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.sigma_model < 0:
            raise ConfigError(f"sigma_model must be >= 0, got {self.sigma_model}")

    @property
    def prediction_scale(self) -> float:
        return math.sqrt(self.sigma**2 + self.sigma_model**2)


@dataclass(frozen=True)
class OrderStatTable:
    """Expected predictions at descending ranks 1..k."""

    spec: GaussianRankingSpec
    k: int
    expected_prediction: tuple[float, ...]
    alpha: float

    def __post_init__(self) -> None:
        if not (1 <= self.k <= self.spec.n):
            raise ConfigError(f"k must be in [1, n], got {self.k}")
        if len(self.expected_prediction) != self.k:
            raise ConfigError("expected_prediction must have one entry per rank")


def _plotting_position(n: int, i: int, alpha: float) -> float:
    arg = (n - i - alpha + 1.0) / (n - 2.0 * alpha + 1.0)
    if not (0.0 < arg < 1.0):
        raise DomainError(
            f"plotting position {arg} outside (0, 1) for n={n}, i={i}, alpha={alpha}; "
            "alpha=0.375 keeps it valid for every rank"
        )
    return arg


def expected_order_stat(spec: GaussianRankingSpec, i: int, alpha: float = BLOM_ALPHA) -> float:
    """Approximate E[prediction at rank i], rank 1 being the largest."""
    if not (1 <= i <= spec.n):
        raise DomainError(f"rank must be in [1, n={spec.n}], got {i}")
    return spec.mu + spec.prediction_scale * inv_norm_cdf(_plotting_position(spec.n, i, alpha))


def order_stat_table(spec: GaussianRankingSpec, k: int, alpha: float = BLOM_ALPHA) -> OrderStatTable:
    values = tuple(expected_order_stat(spec, i, alpha) for i in range(1, k + 1))
    return OrderStatTable(spec=spec, k=k, expected_prediction=values, alpha=alpha)


def expected_topk_sum(spec: GaussianRankingSpec, k: int, alpha: float = BLOM_ALPHA) -> float:
    """Expected sum of predicted scores over ranks 1..k.

    With sigma_model = 0 this is the optimal top-k return; with
    sigma_model > 0 it overshoots the optimum because the noise factor
    sqrt(sigma^2 + sigma_model^2) scales every positive quantile term.
    """
    if not (1 <= k <= spec.n):
        raise DomainError(f"k must be in [1, n={spec.n}], got {k}")
    return sum(expected_order_stat(spec, i, alpha) for i in range(1, k + 1))
