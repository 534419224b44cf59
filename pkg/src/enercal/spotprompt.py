"""Two-factor Spot-Prompt calibration via the quotient process.

With X = log(S/I) and Y = log I, the pair follows a one-factor
mean-reversion model on the quotient plus a drifting random walk on the
index, so the one-factor machinery calibrates the rate, quotient level,
and quotient volatility directly. Spot volatility and the spot-index
correlation are then recovered from the covariance of the normalized
innovations: with the quotient innovation divided by gamma and the index
innovation divided by sqrt(dt), Cov = sigma_I (sigma_S rho - sigma_I)
per bucket, which yields the product sigma_S rho, then sigma_S through
sigma^2 = sigma_S^2 + sigma_I^2 - 2 sigma_S sigma_I rho, then rho.

Sampling noise can leave sigma_S^2 negative or push rho outside [-1, 1];
such buckets are reported invalid rather than clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mrcal
from .mrcal import CalibrateOptions, CalibrationResult, _coef_arrays
from .stats import FitReport, Interval, corr_ci, fit_report, vol_ci
from .timeseries import (
    DataError,
    FactorSeries,
    PriceSeries,
    StepSeries,
    align,
    daycount,
    month_bucket_key,
    to_steps,
)


def rho_nu_xi(a: float, dt: float) -> float:
    """Correlation between the OU-kernel and flat-kernel integrals of one Brownian.

    kappa/(gamma sqrt(dt)) = sqrt(2(1 - e^{-a dt}) / (a dt (1 + e^{-a dt}))),
    which stays near 1 even for large a dt (0.99 at a dt = 0.5, 0.96 at 1).
    """
    if a < 0 or dt <= 0:
        raise DataError("rho_nu_xi requires a >= 0 and dt > 0")
    x = a * dt
    if x < 1e-8:
        return 1.0
    e = math.exp(-x)
    return math.sqrt(2.0 * (1.0 - e) / (x * (1.0 + e)))


def covar_recover(x_innov, y_innov, buckets, sigma_i_by_bucket: dict) -> dict:
    """Per-bucket product sigma_S rho from normalized innovation covariances.

    x_innov must be quotient innovations divided by gamma, y_innov index
    innovations divided by sqrt(dt). product = Cov/sigma_I + sigma_I with
    the 1/(n-1) sample covariance; buckets with sigma_I = 0 (or fewer than
    two pairs) are omitted.
    """
    x_innov = np.asarray(x_innov, dtype=float)
    y_innov = np.asarray(y_innov, dtype=float)
    buckets = list(buckets)
    if not (x_innov.size == y_innov.size == len(buckets)):
        raise DataError("innovation arrays and bucket labels must be equally long")
    out = {}
    for key in sorted(set(buckets), key=str):
        sig_i = sigma_i_by_bucket.get(key)
        if sig_i is None or sig_i == 0.0:
            continue
        mask = np.array([bk == key for bk in buckets])
        if int(mask.sum()) < 2:
            continue
        xs = x_innov[mask]
        ys = y_innov[mask]
        cov = float(np.sum((xs - xs.mean()) * (ys - ys.mean())) / (xs.size - 1))
        out[key] = cov / sig_i + sig_i
    return out


@dataclass(frozen=True)
class SPParams:
    """Calibrated Spot-Prompt model.

    Volatilities are keyed by calendar month; rho is keyed by the
    correlation-granularity bucket ("all" when flat). Buckets where the
    recovery broke down are listed in invalid_buckets with the reason.
    """

    a: float
    a_stderr: float | None
    theta_tilde: dict
    sigma_q: dict
    mu: dict
    sigma_i: dict
    sigma_s: dict
    rho: dict
    sigma_q_ci: dict
    sigma_i_ci: dict
    sigma_s_ci: dict
    rho_ci: dict
    counts_month: dict
    counts_rho: dict
    vol_granularity: str
    corr_granularity: str
    invalid_buckets: tuple
    diagnostics: tuple
    label: str = ""


@dataclass(frozen=True)
class SPOptions:
    vol_granularity: str = "monthly"
    corr_granularity: str = "flat"  # matches reporting practice: monthly vols, flat rho
    alpha: float = 0.05
    unbiased: bool = True
    roll_dates: tuple = ()


@dataclass(frozen=True)
class SPCalibration:
    params: SPParams
    spot_factor: FactorSeries
    index_factor: FactorSeries
    spot_report: FitReport
    index_report: FitReport
    quotient: CalibrationResult


def _roll_straddle_mask(timestamps, roll_dates) -> np.ndarray:
    """keep[k] is False when a roll falls in (t_k, t_{k+1}]."""
    keep = np.ones(len(timestamps) - 1, dtype=bool)
    for roll in roll_dates:
        for k in range(len(timestamps) - 1):
            if timestamps[k] < roll <= timestamps[k + 1]:
                keep[k] = False
    return keep


def calibrate_sp(spot: PriceSeries, index: PriceSeries,
                 options: SPOptions | None = None) -> SPCalibration:
    """Calibrate the Spot-Prompt model from paired spot and index histories.

    Pipeline: align the series, calibrate the quotient X = log(S/I) with
    the one-factor engine, calibrate Y = log I in the zero-rate model,
    recover sigma_S rho from innovation covariances per volatility bucket,
    then sigma_S and rho, and build both factor series with fit reports.
    Pairs straddling supplied roll dates are excluded from estimation.
    """
    options = options or SPOptions()
    try:
        spot_a, index_a = align(spot, index)
    except DataError as exc:
        raise DataError(f"spot/index alignment failed: {exc}") from exc
    if np.any(spot_a.values <= 0) or np.any(index_a.values <= 0):
        raise DataError("Spot-Prompt calibration requires positive prices")
    quotient = PriceSeries(spot_a.timestamps, spot_a.values / index_a.values,
                           label=f"{spot.label or 'spot'}/{index.label or 'index'}")
    steps_q = to_steps(quotient, "log")
    steps_y = to_steps(index_a, "log")
    if options.roll_dates:
        keep = _roll_straddle_mask(quotient.timestamps, options.roll_dates)
        steps_q = steps_q.take(keep)
        steps_y = steps_y.take(keep)
    C = daycount(quotient)
    mr_opts = CalibrateOptions(vol_granularity=options.vol_granularity,
                               alpha=options.alpha, unbiased=options.unbiased)
    q_result = mrcal.calibrate_steps(steps_q, C, mr_opts, label=quotient.label)
    qp = q_result.params
    bs = mrcal.bs_calibrate(steps_y, unbiased=options.unbiased)

    diagnostics = list(qp.diagnostics)
    invalid: list[tuple] = []

    # normalized innovations: quotient / gamma, index / sqrt(dt)
    eta, kappa, gamma = _coef_arrays(qp.a, steps_q.dt)
    theta_pair = np.array([qp.theta[key] for key in steps_q.my_keys])[steps_q.my_index]
    x_innov = (steps_q.x_next - eta * steps_q.x_prev - theta_pair * kappa) / gamma
    mu_pair = np.array([bs.mu[key] for key in steps_y.my_keys])[steps_y.my_index]
    y_innov = (steps_y.x_next - steps_y.x_prev - mu_pair * steps_y.dt) / np.sqrt(steps_y.dt)

    # recovery runs at the volatility granularity, where sigma and sigma_I live
    vol_keys_per_pair = [month_bucket_key(int(m), options.vol_granularity)
                         for m in steps_q.month]
    idx, bucket_keys = steps_q.vol_buckets(options.vol_granularity)
    counts_bucket = {key: int(n) for key, n in
                     zip(bucket_keys, np.bincount(idx, minlength=len(bucket_keys)))}
    sigma_q_bucket = mrcal.sigma_hat(steps_q, qp.a, qp.theta, options.unbiased,
                                     options.vol_granularity)
    # aggregate index vol onto the same buckets
    sigma_i_bucket: dict = {}
    u = 1 if options.unbiased else 0
    mu_resid2 = (steps_y.x_next - steps_y.x_prev - mu_pair * steps_y.dt) ** 2 / steps_y.dt
    for key in bucket_keys:
        mask = np.array([bk == key for bk in vol_keys_per_pair])
        n = int(mask.sum())
        if n > u:
            sigma_i_bucket[key] = math.sqrt(float(mu_resid2[mask].sum()) / (n - u))

    products = covar_recover(x_innov, y_innov, vol_keys_per_pair, sigma_i_bucket)

    sigma_s_bucket: dict = {}
    rho_bucket: dict = {}
    for key in bucket_keys:
        sig_q = sigma_q_bucket.get(key)
        sig_i = sigma_i_bucket.get(key)
        if sig_q is None or sig_i is None:
            invalid.append((key, "bucket too thin to estimate"))
            continue
        if sig_i == 0.0:
            # degenerate index: the model collapses to one factor on X
            sigma_s_bucket[key] = sig_q
            diagnostics.append(f"bucket {key}: index volatility is zero; "
                               "correlation unidentifiable")
            continue
        product = products.get(key)
        if product is None:
            invalid.append((key, "no covariance estimate"))
            continue
        sig_s2 = sig_q * sig_q - sig_i * sig_i + 2.0 * product * sig_i
        if sig_s2 <= 0.0:
            invalid.append((key, "recovered spot variance nonpositive"))
            continue
        sig_s = math.sqrt(sig_s2)
        r = product / sig_s
        if abs(r) >= 1.0:
            invalid.append((key, f"recovered correlation {r:.4f} outside (-1, 1)"))
            sigma_s_bucket[key] = sig_s
            continue
        sigma_s_bucket[key] = sig_s
        rho_bucket[key] = r

    # expand bucket estimates to calendar months and attach intervals
    months_present = sorted(set(int(m) for m in steps_q.month))
    sigma_q_m, sigma_i_m, sigma_s_m = {}, {}, {}
    ci_q, ci_i, ci_s = {}, {}, {}
    counts_month = {}
    for m in months_present:
        key = month_bucket_key(m, options.vol_granularity)
        n = counts_bucket[key]
        counts_month[m] = n
        if key in sigma_q_bucket:
            sigma_q_m[m] = sigma_q_bucket[key]
            ci_q[m] = vol_ci(sigma_q_bucket[key], n, options.alpha)
        if key in sigma_i_bucket and sigma_i_bucket[key] > 0:
            sigma_i_m[m] = sigma_i_bucket[key]
            ci_i[m] = vol_ci(sigma_i_bucket[key], n, options.alpha)
        elif key in sigma_i_bucket:
            sigma_i_m[m] = 0.0
        if key in sigma_s_bucket:
            sigma_s_m[m] = sigma_s_bucket[key]
            ci_s[m] = vol_ci(sigma_s_bucket[key], n, options.alpha)

    # correlation at its own granularity
    rho_out: dict = {}
    rho_ci: dict = {}
    counts_rho: dict = {}
    if options.corr_granularity == options.vol_granularity:
        for key, r in rho_bucket.items():
            n = counts_bucket[key]
            rho_out[key] = r
            counts_rho[key] = n
            if n >= 4:
                rho_ci[key] = corr_ci(r, n, options.alpha)
    elif options.corr_granularity == "flat":
        num = 0.0
        den = 0
        for key, r in rho_bucket.items():
            num += counts_bucket[key] * r
            den += counts_bucket[key]
        if den > 0:
            r_flat = num / den
            rho_out["all"] = r_flat
            counts_rho["all"] = den
            if den >= 4 and abs(r_flat) < 1.0:
                rho_ci["all"] = corr_ci(r_flat, den, options.alpha)
    else:
        raise DataError("correlation granularity must be flat or match the "
                        "volatility granularity")

    params = SPParams(
        a=qp.a, a_stderr=qp.a_stderr, theta_tilde=qp.theta, sigma_q=sigma_q_m,
        mu=bs.mu, sigma_i=sigma_i_m, sigma_s=sigma_s_m, rho=rho_out,
        sigma_q_ci=ci_q, sigma_i_ci=ci_i, sigma_s_ci=ci_s, rho_ci=rho_ci,
        counts_month=counts_month, counts_rho=counts_rho,
        vol_granularity=options.vol_granularity,
        corr_granularity=options.corr_granularity,
        invalid_buckets=tuple(invalid), diagnostics=tuple(diagnostics),
        label=spot.label or "spot")
    spot_f = spot_factor(steps_q, steps_y, params)
    index_f = mrcal.bs_residuals(steps_y, bs)
    index_f = FactorSeries(index_f.timestamps, index_f.values,
                           label=f"{index.label or 'index'}")
    spot_rep = fit_report(spot_f.values)
    index_rep = fit_report(index_f.values)
    return SPCalibration(params, spot_f, index_f, spot_rep, index_rep, q_result)


def spot_factor(steps_q: StepSeries, steps_y: StepSeries, params: SPParams) -> FactorSeries:
    """Approximate standardized spot innovations for the joint model.

    eps_S ~= (X_next - eta X_prev - theta kappa + (gamma/sqrt(dt)) (Y_next -
    Y_prev - mu dt)) / (sigma_S gamma); the quality of the nu ~= xi
    identification behind it is rho_nu_xi(a, dt), close to 1 for daily data.
    """
    if len(steps_q) != len(steps_y):
        raise DataError("quotient and index steps must be aligned")
    eta, kappa, gamma = _coef_arrays(params.a, steps_q.dt)
    theta_pair = np.array([params.theta_tilde[key] for key in steps_q.my_keys])[steps_q.my_index]
    try:
        mu_pair = np.array([params.mu[key] for key in steps_y.my_keys])[steps_y.my_index]
    except KeyError as exc:
        raise DataError(f"no index drift for bucket {exc.args[0]}") from None
    try:
        sig_s = np.array([params.sigma_s[int(m)] for m in steps_q.month])
    except KeyError as exc:
        raise DataError(f"no spot volatility for month {exc.args[0]}") from None
    if np.any(sig_s <= 0):
        raise DataError("spot volatility must be positive in every bucket")
    y_part = (gamma / np.sqrt(steps_y.dt)) * (steps_y.x_next - steps_y.x_prev
                                              - mu_pair * steps_y.dt)
    eps = (steps_q.x_next - eta * steps_q.x_prev - theta_pair * kappa + y_part) / (sig_s * gamma)
    return FactorSeries(steps_q.t_prev, eps, label=f"{params.label}:spot")
