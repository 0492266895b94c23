"""Closed-form reference laws, special constants and statistical test primitives.

Everything the Monte-Carlo harness judges simulations against lives here:
exact CDFs, the smallest positive root of the Bessel function J0, one- and
two-sample Kolmogorov-Smirnov tests with fixed asymptotic thresholds, and
Wilson score intervals for empirical frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError

__all__ = [
    "TestResult",
    "j0_constant",
    "bessel_j0",
    "law_cdf",
    "make_cdf",
    "ks_statistic",
    "ks_test",
    "ks_two_sample",
    "tail_frequency",
    "wilson_interval",
    "bessel3_sup_tail_lower",
    "ladder_integral_upper_envelope",
    "exit_integral_lower_envelope",
]

# Asymptotic one-sample KS thresholds c(alpha)/sqrt(n).
KS_COEFF = {0.05: 1.36, 0.01: 1.63}


@dataclass(frozen=True)
class TestResult:
    """Outcome of one statistical check: pass iff statistic < threshold."""

    statistic: float
    threshold: float
    n: int
    passed: bool
    law_tag: str

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "threshold": self.threshold,
            "n": self.n,
            "pass": self.passed,
            "law_tag": self.law_tag,
        }


def bessel_j0(x: float) -> float:
    """Bessel function J0 by its ascending series.

    Pure arithmetic (no libm special functions); the term count is sized for
    |x| <= 4 where the series is rapidly convergent.
    """
    if abs(x) > 4.0:
        raise DomainError(f"series evaluation restricted to |x| <= 4, got {x}")
    q = 0.25 * x * x
    term = 1.0
    terms = [1.0]
    for k in range(1, 40):
        term *= -q / (k * k)
        terms.append(term)
        if abs(term) < 1e-20:
            break
    return math.fsum(terms)


@lru_cache(maxsize=1)
def j0_constant() -> float:
    """Smallest strictly positive root of J0, by bisection on [2, 3] to 1e-12."""
    lo, hi = 2.0, 3.0
    flo = bessel_j0(lo)
    while hi - lo > 1e-13:
        mid = 0.5 * (lo + hi)
        fmid = bessel_j0(mid)
        if fmid == 0.0:
            return mid
        if (flo < 0.0) == (fmid < 0.0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _reg_lower_gamma(shape: float, x: float) -> float:
    """Regularized lower incomplete gamma P(shape, x) by series / continued fraction."""
    if x < 0.0 or shape <= 0.0:
        raise DomainError("gamma law requires shape > 0 and x >= 0")
    if x == 0.0:
        return 0.0
    lg = math.lgamma(shape)
    if x < shape + 1.0:
        # series representation
        term = 1.0 / shape
        total = term
        a = shape
        for _ in range(500):
            a += 1.0
            term *= x / a
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return total * math.exp(-x + shape * math.log(x) - lg)
    # continued fraction for the upper tail (Lentz's method)
    tiny = 1e-300
    b = x + 1.0 - shape
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 500):
        an = -i * (i - shape)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    upper = math.exp(-x + shape * math.log(x) - lg) * h
    return 1.0 - upper


def law_cdf(law: str, arg: float, *params: float) -> float:
    """Exact closed-form law evaluation.

    * ``sup_sq_bessel0_tail`` (no params): the all-time-sup tail probability
      1/arg of a squared Bessel(0) started at 1, for arg >= 1.
    * ``sq_bessel2_marginal`` (v): CDF at arg of a squared Bessel(2) at time v
      started at 0, i.e. 1 - exp(-arg / 2v).
    * ``exponential`` (mean): CDF 1 - exp(-arg / mean).
    * ``gamma`` (shape, scale): regularized lower incomplete gamma.
    """
    if law == "sup_sq_bessel0_tail":
        if arg < 1.0:
            raise DomainError("sup tail defined for levels >= the start 1")
        return 1.0 / arg
    if law == "sq_bessel2_marginal":
        (v,) = params
        if v <= 0.0:
            raise DomainError("time parameter must be > 0")
        return 1.0 - math.exp(-max(arg, 0.0) / (2.0 * v))
    if law == "exponential":
        (mean,) = params
        if mean <= 0.0:
            raise DomainError(f"exponential mean must be > 0, got {mean}")
        return 1.0 - math.exp(-max(arg, 0.0) / mean)
    if law == "gamma":
        shape, scale = params
        if scale <= 0.0:
            raise DomainError("gamma scale must be > 0")
        return _reg_lower_gamma(shape, max(arg, 0.0) / scale)
    raise DomainError(f"unknown law: {law!r}")


def make_cdf(law: str, *params: float) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized CDF callable for :func:`ks_test`, tagged with its law name."""

    def cdf(x):
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.array([law_cdf(law, xi, *params) for xi in xs])
        return out if np.ndim(x) else float(out[0])

    cdf.law_tag = law + "(" + ",".join(f"{p:g}" for p in params) + ")"
    return cdf


def ks_statistic(samples: Sequence[float], cdf) -> float:
    """One-sample Kolmogorov-Smirnov statistic sup |F_n - F|."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    f = np.asarray(cdf(x), dtype=float)
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    return float(max(np.max(ecdf_hi - f), np.max(f - ecdf_lo)))


def ks_test(samples: Sequence[float], cdf, alpha_level: float = 0.01) -> TestResult:
    """One-sample KS test against an exact CDF at a fixed asymptotic level.

    Threshold is 1.36/sqrt(n) at the 0.05 level and 1.63/sqrt(n) at 0.01.
    Requires at least 50 finite samples.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 50:
        raise InsufficientDataError(f"KS test needs n >= 50, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise DomainError("KS test requires finite samples")
    if alpha_level not in KS_COEFF:
        raise DomainError(f"alpha level must be one of {sorted(KS_COEFF)}")
    stat = ks_statistic(x, cdf)
    threshold = KS_COEFF[alpha_level] / math.sqrt(x.size)
    tag = getattr(cdf, "law_tag", getattr(cdf, "__name__", "cdf"))
    return TestResult(stat, threshold, int(x.size), stat < threshold, tag)


def ks_two_sample(
    a: Sequence[float], b: Sequence[float], alpha_level: float = 0.01, law_tag: str = ""
) -> TestResult:
    """Two-sample KS test with threshold c(alpha) * sqrt((n+m)/(n*m))."""
    xa = np.sort(np.asarray(a, dtype=float))
    xb = np.sort(np.asarray(b, dtype=float))
    n, m = xa.size, xb.size
    if min(n, m) < 50:
        raise InsufficientDataError("two-sample KS needs n, m >= 50")
    allv = np.concatenate((xa, xb))
    fa = np.searchsorted(xa, allv, side="right") / n
    fb = np.searchsorted(xb, allv, side="right") / m
    stat = float(np.max(np.abs(fa - fb)))
    threshold = KS_COEFF[alpha_level] * math.sqrt((n + m) / (n * m))
    return TestResult(stat, threshold, int(min(n, m)), stat < threshold, law_tag or "two-sample")


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple:
    """95% Wilson score interval for a binomial proportion."""
    if n < 1:
        raise InsufficientDataError("Wilson interval needs n >= 1")
    p = successes / n
    z2 = z * z
    denom = 1.0 + z2 / n
    center = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def tail_frequency(samples: Sequence[float], predicate_threshold: float) -> tuple:
    """Fraction of samples >= threshold, with its 95% Wilson interval."""
    x = np.asarray(samples, dtype=float)
    if x.size < 1:
        raise InsufficientDataError("tail_frequency needs n >= 1")
    k = int(np.count_nonzero(x >= predicate_threshold))
    return k / x.size, wilson_interval(k, x.size)


# ---------------------------------------------------------------------------
# Inequality envelopes (bounds with unspecified universal constants; tests
# against them are one-sided with documented slack).
# ---------------------------------------------------------------------------


def bessel3_sup_tail_lower(a: float, x: float) -> float:
    """Lower envelope (a/sqrt(x)) exp(-a^2/2x) for P(sup of a 3-d Bessel on [0,x] > a)."""
    if a <= 0.0 or x <= 0.0:
        raise DomainError("envelope requires a, x > 0")
    return (a / math.sqrt(x)) * math.exp(-a * a / (2.0 * x))


def ladder_integral_upper_envelope(lam: float) -> float:
    """Shape exp(-j0^2 lam / 16) bounding the tail of the two-sided ladder integral."""
    j0 = j0_constant()
    return math.exp(-j0 * j0 * lam / 16.0)


def exit_integral_lower_envelope(lam: float) -> float:
    """Shape (2/(e sqrt(lam)) + e sqrt(lam)/2) exp(-2/(e^2 lam)) bounding the
    lower tail of the bottom-to-exit integral."""
    if lam <= 0.0:
        raise DomainError("envelope requires lam > 0")
    r = math.sqrt(lam)
    return (2.0 / (math.e * r) + math.e * r / 2.0) * math.exp(-2.0 / (math.e ** 2 * lam))
