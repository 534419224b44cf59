"""Residual diagnostics and confidence intervals.

Normality of standardized model residuals is checked with Jarque-Bera and
a Kolmogorov-Smirnov test against a fully specified standard normal null
(residuals are standardized by construction, so no Lilliefors correction
is applied; this is conservative when parameters were estimated).

The JB statistic is asymptotically chi-square(2), but the approximation is
poor below a few thousand observations, so p-values for n <= 2000 come
from a Monte Carlo null table simulated once per process with a fixed
seed and interpolated in log n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "Interval", "FitReport", "moments", "jarque_bera", "jb_pvalue",
    "ks_test", "qks", "vol_ci", "corr_ci", "mr_ci", "fit_report",
    "chi2_quantile", "normal_quantile",
]


@dataclass(frozen=True)
class Interval:
    """A two-sided confidence interval around a point estimate."""

    estimate: float
    lower: float
    upper: float
    alpha: float

    def __post_init__(self):
        if not (self.lower <= self.estimate <= self.upper):
            raise ValueError(
                f"interval must bracket its estimate: {self.lower} {self.estimate} {self.upper}"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class FitReport:
    """Summary statistics of a residual series."""

    mean: float
    stddev: float
    skewness: float
    excess_kurtosis: float
    jb_stat: float
    jb_pvalue: float
    ks_stat: float
    ks_pvalue: float
    n: int


def moments(x) -> tuple[float, float, float, float]:
    """Mean, stddev, skewness, and excess kurtosis of a sample.

    Central moments mu_k = mean((x - xbar)^k); stddev is sqrt(mu_2),
    skewness mu_3/mu_2^{3/2}, excess kurtosis mu_4/mu_2^2 - 3.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("moments need at least 2 observations")
    mean = float(x.mean())
    xc = x - mean
    mu2 = float(np.mean(xc * xc))
    if mu2 == 0.0:
        raise ValueError("degenerate sample: zero variance")
    mu3 = float(np.mean(xc ** 3))
    mu4 = float(np.mean(xc ** 4))
    skew = mu3 / mu2 ** 1.5
    exkurt = mu4 / (mu2 * mu2) - 3.0
    return mean, math.sqrt(mu2), skew, exkurt


# --- Jarque-Bera -----------------------------------------------------------

_JB_LADDER = (10, 20, 50, 100, 250, 500, 1000, 2000)
_JB_SIMULATIONS = 100_000
_JB_SEED = 20100301
_jb_tables: dict[int, np.ndarray] = {}


def _jb_null_table(n: int) -> np.ndarray:
    """Sorted JB statistics of _JB_SIMULATIONS standard-normal samples of size n."""
    table = _jb_tables.get(n)
    if table is not None:
        return table
    rng = np.random.Generator(np.random.Philox(key=np.array([_JB_SEED, n], dtype=np.uint64)))
    out = np.empty(_JB_SIMULATIONS)
    batch = max(1, int(2e7) // n)
    done = 0
    while done < _JB_SIMULATIONS:
        k = min(batch, _JB_SIMULATIONS - done)
        x = rng.standard_normal((k, n))
        xc = x - x.mean(axis=1, keepdims=True)
        x2 = xc * xc
        mu2 = np.mean(x2, axis=1)
        mu3 = np.mean(x2 * xc, axis=1)
        mu4 = np.mean(x2 * x2, axis=1)
        s = mu3 / (mu2 * np.sqrt(mu2))
        ek = mu4 / (mu2 * mu2) - 3.0
        out[done:done + k] = n / 6.0 * (s * s + 0.25 * ek * ek)
        done += k
    out.sort()
    _jb_tables[n] = out
    return out


def _jb_table_pvalue(jb: float, n: int) -> float:
    table = _jb_null_table(n)
    count_ge = table.size - int(np.searchsorted(table, jb, side="left"))
    return count_ge / table.size


def jb_pvalue(jb: float, n: int) -> float:
    """P-value of a JB statistic: Monte Carlo table for n <= 2000, else chi2(2) tail."""
    if jb < 0:
        raise ValueError("JB statistic must be nonnegative")
    if n > _JB_LADDER[-1]:
        return math.exp(-0.5 * jb)  # chi-square(2) survival function
    n_eff = max(n, _JB_LADDER[0])
    if n_eff in _JB_LADDER:
        p = _jb_table_pvalue(jb, n_eff)
    else:
        hi_pos = int(np.searchsorted(np.array(_JB_LADDER), n_eff))
        n_lo, n_hi = _JB_LADDER[hi_pos - 1], _JB_LADDER[hi_pos]
        p_lo = _jb_table_pvalue(jb, n_lo)
        p_hi = _jb_table_pvalue(jb, n_hi)
        w = (math.log(n_eff) - math.log(n_lo)) / (math.log(n_hi) - math.log(n_lo))
        p = (1.0 - w) * p_lo + w * p_hi
    return min(1.0, max(p, 1.0 / (_JB_SIMULATIONS + 1)))


def jarque_bera(x) -> tuple[float, float]:
    """JB = (n/6)(S^2 + K^2/4) and its p-value. Requires n >= 8."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 8:
        raise ValueError("Jarque-Bera needs at least 8 observations")
    _, _, skew, exkurt = moments(x)
    jb = n / 6.0 * (skew * skew + 0.25 * exkurt * exkurt)
    return jb, jb_pvalue(jb, n)


# --- Kolmogorov-Smirnov ----------------------------------------------------

def qks(lam: float) -> float:
    """Kolmogorov survival function Q_KS(lam) = 2 sum_j (-1)^{j-1} exp(-2 j^2 lam^2)."""
    if lam <= 0:
        return 1.0
    total = 0.0
    sign = 1.0
    for j in range(1, 200):
        term = math.exp(-2.0 * j * j * lam * lam)
        total += sign * term
        if term < 1e-12:
            break
        sign = -sign
    return min(1.0, max(0.0, 2.0 * total))


def ks_test(x) -> tuple[float, float]:
    """One-sample KS test of a series against the standard normal.

    D0 = max_i(|i/n - N(x_(i))|, |(i+1)/n - N(x_(i))|) on the sorted sample;
    p = Q_KS((sqrt(n) + 0.12 + 0.11/sqrt(n)) D0).
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 5:
        raise ValueError("KS test needs at least 5 observations")
    xs = np.sort(x)
    cdf = special.ndtr(xs)
    i = np.arange(n)
    d0 = float(max(np.max(np.abs(i / n - cdf)), np.max(np.abs((i + 1) / n - cdf))))
    lam = (math.sqrt(n) + 0.12 + 0.11 / math.sqrt(n)) * d0
    return d0, qks(lam)


# --- Quantiles -------------------------------------------------------------

def chi2_quantile(p: float, df: float) -> float:
    """Inverse CDF of the chi-square distribution (via inverse regularized gamma)."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    return 2.0 * float(special.gammaincinv(df / 2.0, p))


def normal_quantile(p: float) -> float:
    """Inverse CDF of the standard normal."""
    if not 0.0 < p < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    return float(special.ndtri(p))


# --- Confidence intervals --------------------------------------------------

def vol_ci(sigma: float, n: int, alpha: float = 0.05) -> Interval:
    """Chi-square confidence interval for a volatility estimated from n innovations.

    lower = sigma sqrt((n-1)/chi2_{n-1}(1-alpha/2)), upper with the alpha/2
    quantile; the interval collapses to the estimate as n grows.
    """
    if n < 2:
        raise ValueError("volatility interval needs n >= 2")
    if sigma <= 0:
        raise ValueError("volatility must be positive")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    q_hi = chi2_quantile(1.0 - alpha / 2.0, n - 1)
    q_lo = chi2_quantile(alpha / 2.0, n - 1)
    return Interval(sigma, sigma * math.sqrt((n - 1) / q_hi),
                    sigma * math.sqrt((n - 1) / q_lo), alpha)


def corr_ci(rho: float, n: int, alpha: float = 0.05) -> Interval:
    """Fisher-transform confidence interval for a correlation from n pairs."""
    if abs(rho) >= 1.0:
        raise ValueError("correlation must lie strictly inside (-1, 1)")
    if n < 4:
        raise ValueError("correlation interval needs n >= 4")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    z = math.atanh(rho)
    h = normal_quantile(1.0 - alpha / 2.0) / math.sqrt(n - 3)
    return Interval(rho, math.tanh(z - h), math.tanh(z + h), alpha)


def mr_ci(a: float, a0: float, a0_stderr: float) -> float:
    """Standard error of the MLE rate, scaled from the regression seed stderr.

    sigma_a = (a / a0) * sigma_{a0}; requires a positive seed.
    """
    if a0 <= 0:
        raise ValueError("seed rate must be positive to scale its stderr")
    return (a / a0) * a0_stderr


def fit_report(x) -> FitReport:
    """Full residual diagnostic: moments plus JB and KS tests."""
    x = np.asarray(x, dtype=float)
    mean, std, skew, exkurt = moments(x)
    jb, jb_p = jarque_bera(x)
    d0, ks_p = ks_test(x)
    return FitReport(mean, std, skew, exkurt, jb, jb_p, d0, ks_p, int(x.size))
