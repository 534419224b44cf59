"""One-factor mean-reversion calibration by profile maximum likelihood.

Over an irregular step dt the model transition is Gaussian,

    X_{t+dt} = eta X_t + theta kappa + sigma gamma eps,
    eta = exp(-a dt),  kappa = (1 - exp(-a dt))/a,
    gamma = sqrt((1 - exp(-2 a dt)) / (2 a)),

with per-(month, year) levels theta and yearly-periodic volatilities
sigma. Given the rate a, both term structures have closed-form
maximizers, so a is found by a one-dimensional Brent search on the
concentrated (profile) log likelihood, seeded by a constant-step
regression estimate rescaled by the observation density.

Volatility is reported as the square root of the estimated variance;
the unbiased (N-1) variance estimator is the default, the plain MLE is
available behind a flag. The log likelihood includes the -log(2 pi)/2
constant per term so values are comparable across rates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .stats import Interval, FitReport, fit_report, mr_ci, vol_ci
from .timeseries import (
    DataError,
    FactorSeries,
    PriceSeries,
    StepSeries,
    daycount,
    month_bucket_key,
    to_steps,
)

_TAYLOR_SWITCH = 1e-8  # use series forms of kappa/gamma once a*dt drops below this
_LOG_2PI = math.log(2.0 * math.pi)


class CalibrationError(RuntimeError):
    """Calibration could not complete; carries the best rate found, if any."""

    def __init__(self, message: str, best_a: float | None = None):
        super().__init__(message)
        self.best_a = best_a


@dataclass(frozen=True)
class Coefs:
    """Step coefficients (eta, kappa, gamma) of the exact transition."""

    eta: float
    kappa: float
    gamma: float


def _coef_arrays(a: float, dt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized eta/kappa/gamma with second-order series forms near a*dt = 0."""
    dt = np.asarray(dt, dtype=float)
    x = a * dt
    eta = np.exp(-x)
    small = x < _TAYLOR_SWITCH
    a_safe = a if a > 0 else 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        kappa = np.where(small, dt * (1.0 - 0.5 * x + x * x / 6.0), (1.0 - eta) / a_safe)
        gamma2 = np.where(small, dt * (1.0 - x + (2.0 / 3.0) * x * x),
                          (1.0 - eta * eta) / (2.0 * a_safe))
    return eta, kappa, np.sqrt(gamma2)


def coefs(a: float, dt: float) -> Coefs:
    """Transition coefficients for one step. Requires dt > 0 and a >= 0."""
    if dt <= 0:
        raise DataError(f"coefs requires dt > 0, got {dt}")
    if a < 0:
        raise DataError(f"coefs requires a >= 0, got {a}")
    eta, kappa, gamma = _coef_arrays(a, np.array([dt]))
    return Coefs(float(eta[0]), float(kappa[0]), float(gamma[0]))


def theta_hat(steps: StepSeries, a: float) -> dict[tuple[int, int], float]:
    """Closed-form MLE of the per-(month, year) level at a given rate.

    theta_{(m,y)} = sum(X_next - eta X_prev) / sum(kappa) over pairs whose
    earlier timestamp falls in (m, y).
    """
    if a < 0:
        raise DataError("mean-reversion rate must be nonnegative")
    eta, kappa, _ = _coef_arrays(a, steps.dt)
    nbuckets = len(steps.my_keys)
    num = np.bincount(steps.my_index, weights=steps.x_next - eta * steps.x_prev,
                      minlength=nbuckets)
    den = np.bincount(steps.my_index, weights=kappa, minlength=nbuckets)
    return {key: float(n / d) for key, n, d in zip(steps.my_keys, num, den)}


def _theta_per_pair(steps: StepSeries, theta: dict) -> np.ndarray:
    try:
        by_bucket = np.array([theta[key] for key in steps.my_keys], dtype=float)
    except KeyError as exc:
        raise DataError(f"no level parameter for bucket {exc.args[0]}") from None
    return by_bucket[steps.my_index]


def sigma_hat(steps: StepSeries, a: float, theta: dict, unbiased: bool = True,
              granularity: str = "monthly") -> dict:
    """Volatility term structure at a given rate and level mapping.

    sigma_b^2 = (1/(N(b) - u)) * sum(((X_next - eta X_prev - theta kappa)/gamma)^2)
    over pairs in bucket b, u = 1 if unbiased else 0. Returns the square
    root keyed by month (or season name / "all" for coarser granularities);
    buckets with too few pairs are omitted.
    """
    if a < 0:
        raise DataError("mean-reversion rate must be nonnegative")
    eta, kappa, gamma = _coef_arrays(a, steps.dt)
    resid = (steps.x_next - eta * steps.x_prev - _theta_per_pair(steps, theta) * kappa) / gamma
    idx, keys = steps.vol_buckets(granularity)
    ssq = np.bincount(idx, weights=resid * resid, minlength=len(keys))
    counts = np.bincount(idx, minlength=len(keys))
    u = 1 if unbiased else 0
    out = {}
    for key, s, n in zip(keys, ssq, counts):
        if n > u:
            out[key] = math.sqrt(s / (n - u))
    return out


def bucket_counts(steps: StepSeries, granularity: str = "monthly") -> dict:
    """Number of pairs per volatility bucket."""
    idx, keys = steps.vol_buckets(granularity)
    counts = np.bincount(idx, minlength=len(keys))
    return {key: int(n) for key, n in zip(keys, counts)}


def my_counts(steps: StepSeries) -> dict[tuple[int, int], int]:
    """Number of pairs per (month, year) bucket."""
    counts = np.bincount(steps.my_index, minlength=len(steps.my_keys))
    return {key: int(n) for key, n in zip(steps.my_keys, counts)}


def profile_loglik(steps: StepSeries, a: float, granularity: str = "monthly") -> float:
    """Concentrated log likelihood L(a) with the MLE theta and sigma plugged in.

    Includes the -log(2 pi)/2 constants. Returns -inf when any bucket
    variance degenerates to zero.
    """
    if a < 0:
        raise DataError("mean-reversion rate must be nonnegative")
    eta, kappa, gamma = _coef_arrays(a, steps.dt)
    nbuckets = len(steps.my_keys)
    num = np.bincount(steps.my_index, weights=steps.x_next - eta * steps.x_prev,
                      minlength=nbuckets)
    den = np.bincount(steps.my_index, weights=kappa, minlength=nbuckets)
    theta_pair = (num / den)[steps.my_index]
    scaled = (steps.x_next - eta * steps.x_prev - theta_pair * kappa) / gamma
    idx, keys = steps.vol_buckets(granularity)
    ssq = np.bincount(idx, weights=scaled * scaled, minlength=len(keys))
    counts = np.bincount(idx, minlength=len(keys))
    sig2 = ssq / counts  # MLE variance (biased) per bucket
    if np.any(sig2 <= 0.0):
        return -math.inf
    sig2_pair = sig2[idx]
    loglik = -0.5 * _LOG_2PI * len(steps) \
        - 0.5 * float(np.sum(np.log(sig2_pair))) - float(np.sum(np.log(gamma))) \
        - 0.5 * float(np.sum(scaled * scaled / sig2_pair))
    return loglik


@dataclass(frozen=True)
class SeedResult:
    """Constant-step regression seed for the rate, daycount-adjusted."""

    a0: float
    a0_stderr: float
    kappa_step: float
    fallback: bool


def regression_seed(steps: StepSeries, C: float) -> SeedResult:
    """Initial rate guess from a pooled AR(1) regression on demeaned steps.

    Each (month, year) bucket is demeaned by its own arithmetic mean in X
    space (the geometric mean of prices under log). The pooled slope
    kappa of X_next on X_prev gives a0 = -log(kappa) * C; its standard
    error sigma_kappa = sqrt(S_xx / Delta) propagates through the log by
    the delta method. A nonpositive (or >= 1) slope falls back to 1.0/yr
    with infinite stderr: the regression shortcut can fail on strongly
    irregular series.
    """
    n = len(steps)
    if n < 3:
        raise DataError("regression seed needs at least 3 pairs")
    nbuckets = len(steps.my_keys)
    counts = np.bincount(steps.my_index, minlength=nbuckets).astype(float)
    mean_prev = np.bincount(steps.my_index, weights=steps.x_prev, minlength=nbuckets) / counts
    mean_next = np.bincount(steps.my_index, weights=steps.x_next, minlength=nbuckets) / counts
    x = steps.x_prev - mean_prev[steps.my_index]
    y = steps.x_next - mean_next[steps.my_index]
    sx = float(np.sum(x))
    sy = float(np.sum(y))
    sxx = float(np.sum(x * x))
    sxy = float(np.sum(x * y))
    delta = n * sxx - sx * sx
    if delta <= 0:
        return SeedResult(1.0, math.inf, math.nan, True)
    kappa_step = (n * sxy - sx * sy) / delta
    if kappa_step <= 0.0 or kappa_step >= 1.0:
        return SeedResult(1.0, math.inf, kappa_step, True)
    sigma_kappa = math.sqrt(sxx / delta)
    a0 = -math.log(kappa_step) * C
    a0_stderr = sigma_kappa / kappa_step * C
    return SeedResult(a0, a0_stderr, kappa_step, False)


def _maximize_profile(steps: StepSeries, lo: float, hi: float,
                      granularity: str) -> tuple[float, float, tuple[float, float]]:
    """Brent maximization of L(a) over a bracket, widening on boundary hits.

    A coarse scan locates the global peak region before the local Brent
    polish, so a multi-modal profile cannot trap the search. Widens the
    bracket by a factor 10 (both sides) up to 3 times when the maximum
    lands on a boundary, then gives up.
    """
    def neg(a):
        return -profile_loglik(steps, a, granularity)

    best_overall = None
    for attempt in range(4):
        grid = np.linspace(lo, hi, 160)
        values = np.array([neg(a) for a in grid])
        k = int(np.argmin(values))
        left = grid[max(k - 2, 0)]
        right = grid[min(k + 2, grid.size - 1)]
        res = optimize.minimize_scalar(neg, bounds=(left, right), method="bounded",
                                       options={"xatol": max(1e-12, (hi - lo) * 1e-10)})
        a_hat, f_hat = float(res.x), float(res.fun)
        if values[k] < f_hat:
            a_hat, f_hat = float(grid[k]), float(values[k])
        if best_overall is None or f_hat < best_overall[1]:
            best_overall = (a_hat, f_hat)
        tol = (hi - lo) * 1e-3
        if lo + tol < a_hat < hi - tol:
            return a_hat, -f_hat, (lo, hi)
        lo = max(lo / 10.0, 1e-9)
        hi = hi * 10.0
        del attempt
    raise CalibrationError(
        f"profile likelihood maximum stayed on the search boundary after widening; "
        f"best rate found {best_overall[0]:.6g}", best_a=best_overall[0])


def residuals(steps: StepSeries, params: "MRParams") -> FactorSeries:
    """Standardized innovations eps = (X_next - eta X_prev - theta kappa)/(sigma gamma).

    Under a correct model these are i.i.d. standard normal; they are the
    factor series used for joint correlations. Timestamped by the earlier
    (step start) instant.
    """
    eta, kappa, gamma = _coef_arrays(params.a, steps.dt)
    theta_pair = _theta_per_pair(steps, params.theta)
    try:
        sig_pair = np.array([params.sigma[int(m)] for m in steps.month])
    except KeyError as exc:
        raise DataError(f"no volatility for month {exc.args[0]}") from None
    eps = (steps.x_next - eta * steps.x_prev - theta_pair * kappa) / (sig_pair * gamma)
    return FactorSeries(steps.t_prev, eps, label=params.label)


@dataclass(frozen=True)
class MRParams:
    """Calibrated one-factor model: rate plus level and volatility term structures.

    sigma maps calendar months 1..12 to the bucket volatility (months of a
    season share a value under coarser granularities); counts carry the
    estimation sample sizes behind each bucket.
    """

    a: float
    a_stderr: float | None
    theta: dict
    sigma: dict
    sigma_ci: dict
    counts_month: dict
    counts_my: dict
    transform: str
    vol_granularity: str = "monthly"
    label: str = ""
    search_bracket: tuple[float, float] | None = None
    diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class BSParams:
    """Zero-rate (Black-Scholes) limit: drift and volatility term structures."""

    mu: dict
    sigma: dict
    counts_month: dict
    counts_my: dict
    transform: str
    label: str = ""


@dataclass(frozen=True)
class CalibrateOptions:
    vol_granularity: str = "monthly"
    alpha: float = 0.05
    unbiased: bool = True
    low_count: int = 4  # buckets thinner than this get flagged


@dataclass(frozen=True)
class CalibrationResult:
    params: MRParams
    factors: FactorSeries
    report: FitReport
    seed: SeedResult
    loglik: float


def calibrate(series: PriceSeries, transform: str = "log",
              options: CalibrateOptions | None = None) -> CalibrationResult:
    """Full one-factor calibration: seed, Brent search, term structures, diagnostics."""
    options = options or CalibrateOptions()
    steps = to_steps(series, transform)
    C = daycount(series)
    return calibrate_steps(steps, C, options, label=series.label)


def calibrate_steps(steps: StepSeries, C: float, options: CalibrateOptions | None = None,
                    label: str = "") -> CalibrationResult:
    """Calibration entry point for pre-built steps (used by the two-factor model)."""
    options = options or CalibrateOptions()
    if float(np.var(steps.x_prev)) == 0.0 and float(np.var(steps.x_next)) == 0.0:
        raise CalibrationError("zero variance: series is constant")
    diagnostics: list[str] = []
    if len(steps.my_keys) < 2:
        diagnostics.append("fewer than 2 months of data; estimates will be fragile")
    seed = regression_seed(steps, C)
    if seed.fallback:
        diagnostics.append("regression seed failed (slope outside (0,1)); "
                           "default bracket used, rate stderr unavailable")
        lo, hi = 1e-6, 500.0
    else:
        lo, hi = max(1e-6, seed.a0 / 10.0), seed.a0 * 10.0
    a_hat, loglik, bracket = _maximize_profile(steps, lo, hi, options.vol_granularity)
    theta = theta_hat(steps, a_hat)
    sigma_b = sigma_hat(steps, a_hat, theta, options.unbiased, options.vol_granularity)
    counts_b = bucket_counts(steps, options.vol_granularity)
    months_present = sorted(set(int(m) for m in steps.month))
    sigma_month: dict[int, float] = {}
    sigma_ci: dict[int, Interval] = {}
    counts_month: dict[int, int] = {}
    for m in months_present:
        key = month_bucket_key(m, options.vol_granularity)
        counts_month[m] = counts_b[key]
        if key not in sigma_b:
            diagnostics.append(f"volatility bucket {key} too thin to estimate")
            continue
        sigma_month[m] = sigma_b[key]
        sigma_ci[m] = vol_ci(sigma_b[key], counts_b[key], options.alpha)
        if counts_b[key] < options.low_count:
            diagnostics.append(f"low confidence: bucket {key} has only {counts_b[key]} pairs")
    a_stderr = None if seed.fallback else mr_ci(a_hat, seed.a0, seed.a0_stderr)
    params = MRParams(
        a=a_hat, a_stderr=a_stderr, theta=theta, sigma=sigma_month, sigma_ci=sigma_ci,
        counts_month=counts_month, counts_my=my_counts(steps), transform=steps.transform,
        vol_granularity=options.vol_granularity, label=label,
        search_bracket=bracket, diagnostics=tuple(diagnostics))
    factors = residuals(steps, params)
    report = fit_report(factors.values)
    return CalibrationResult(params, factors, report, seed, loglik)


def bs_calibrate(steps: StepSeries, unbiased: bool = True) -> BSParams:
    """Zero mean-reversion (Black-Scholes) MLE: drift per (month, year), vol per month.

    mu_{(m,y)} = sum(X_next - X_prev)/sum(dt); sigma_m^2 averages
    (X_next - X_prev - mu dt)^2/dt. Equals the a -> 0 limit of theta_hat
    and sigma_hat.
    """
    nbuckets = len(steps.my_keys)
    diff = steps.x_next - steps.x_prev
    num = np.bincount(steps.my_index, weights=diff, minlength=nbuckets)
    den = np.bincount(steps.my_index, weights=steps.dt, minlength=nbuckets)
    mu = {key: float(n / d) for key, n, d in zip(steps.my_keys, num, den)}
    mu_pair = np.array([mu[key] for key in steps.my_keys])[steps.my_index]
    scaled2 = (diff - mu_pair * steps.dt) ** 2 / steps.dt
    idx, keys = steps.vol_buckets("monthly")
    ssq = np.bincount(idx, weights=scaled2, minlength=len(keys))
    counts = np.bincount(idx, minlength=len(keys))
    u = 1 if unbiased else 0
    sigma = {key: math.sqrt(s / (n - u)) for key, s, n in zip(keys, ssq, counts) if n > u}
    return BSParams(mu=mu, sigma=sigma,
                    counts_month={key: int(n) for key, n in zip(keys, counts)},
                    counts_my=my_counts(steps), transform=steps.transform)


def bs_residuals(steps: StepSeries, params: BSParams) -> FactorSeries:
    """Standardized Black-Scholes innovations (X_next - X_prev - mu dt)/(sigma sqrt(dt))."""
    mu_pair = _theta_per_pair(steps, params.mu)
    try:
        sig_pair = np.array([params.sigma[int(m)] for m in steps.month])
    except KeyError as exc:
        raise DataError(f"no volatility for month {exc.args[0]}") from None
    eps = (steps.x_next - steps.x_prev - mu_pair * steps.dt) / (sig_pair * np.sqrt(steps.dt))
    return FactorSeries(steps.t_prev, eps, label=params.label)
