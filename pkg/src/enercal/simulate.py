"""Risk-neutral and real-world Monte Carlo engines with exact transitions.

Every model here admits a closed-form conditional Gaussian over a step, so
paths are sampled without discretization bias: refining the grid leaves
the marginal distributions unchanged. Volatility term structures are
piecewise constant per calendar month, which keeps all time integrals in
closed form (sums of exponential integrals).

Randomness is counter-based: path i of a run with seed s draws from a
Philox stream keyed by (s, i), so per-path streams are independent, the
result does not depend on how paths are chunked across workers, and
growing the path count never reshuffles earlier paths.
"""

from __future__ import annotations

import hashlib
import math
import struct
from bisect import bisect_left
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .timeseries import DataError, year_fraction

_CHUNK_TARGET_BYTES = 2 * 10**8  # per-chunk draw matrix budget


# --- randomness --------------------------------------------------------------

def _path_rng(seed: int, path_index: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _path_normals(seed: int, first_path: int, n_paths: int, n_draws: int) -> np.ndarray:
    """Standard normal draws, one independent substream per path."""
    out = np.empty((n_paths, n_draws))
    for i in range(n_paths):
        out[i] = _path_rng(seed, first_path + i).standard_normal(n_draws)
    return out


def _path_chunks(n_paths: int, n_draws: int):
    chunk = max(1024, min(n_paths, _CHUNK_TARGET_BYTES // (8 * max(1, n_draws))))
    start = 0
    while start < n_paths:
        yield start, min(chunk, n_paths - start)
        start += chunk


# --- calendars and curves -----------------------------------------------------

def _next_month_start(t: datetime) -> datetime:
    if t.month == 12:
        return datetime(t.year + 1, 1, 1)
    return datetime(t.year, t.month + 1, 1)


def _month_segments(t0: datetime, t1: datetime):
    """Yield (seg_start, seg_end, month) splitting [t0, t1) at month boundaries."""
    cur = t0
    while cur < t1:
        seg_end = min(_next_month_start(cur), t1)
        yield cur, seg_end, cur.month
        cur = seg_end


def make_grid(start: datetime, end: datetime, freq: str = "B") -> tuple[datetime, ...]:
    """Timestamp grid from start to end: D daily, B weekdays, W weekly, H hourly."""
    if end <= start:
        raise DataError("grid end must be after start")
    step = {"D": timedelta(days=1), "B": timedelta(days=1),
            "W": timedelta(days=7), "H": timedelta(hours=1)}.get(freq)
    if step is None:
        raise DataError(f"unknown grid frequency {freq!r}")
    out = []
    t = start
    while t <= end:
        if freq != "B" or t.weekday() < 5:
            out.append(t)
        t = t + step
    if len(out) < 2:
        raise DataError("grid has fewer than 2 points")
    return tuple(out)


def default_roll_dates(start: datetime, end: datetime, k: int = 3) -> tuple[datetime, ...]:
    """Roll dates: last calendar day of each month minus k weekdays (weekend-only calendar)."""
    out = []
    cur = datetime(start.year, start.month, 1)
    stop = _next_month_start(datetime(end.year, end.month, 1))
    while cur < stop:
        last = _next_month_start(cur) - timedelta(days=1)
        d, counted = last, 0
        while counted < k:
            d = d - timedelta(days=1)
            if d.weekday() < 5:
                counted += 1
        if start <= d <= end:
            out.append(d)
        cur = _next_month_start(cur)
    return tuple(out)


@dataclass(frozen=True)
class ForwardCurve:
    """Forward prices at monthly expiries, step (left-continuous) interpolated.

    price_at(t) returns the price of the earliest contract expiring at or
    after t, so the curve is constant on (T_{i-1}, T_i].
    """

    anchor: datetime
    expiries: tuple[datetime, ...]
    prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "expiries", tuple(self.expiries))
        prices = np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "prices", prices)
        if len(self.expiries) != prices.size or prices.size == 0:
            raise DataError("curve needs equally many expiries and prices")
        if np.any(prices <= 0):
            raise DataError("curve prices must be positive")
        for a, b in zip(self.expiries, self.expiries[1:]):
            if b <= a:
                raise DataError("curve expiries must be strictly increasing")
        if self.expiries[0] < self.anchor:
            raise DataError("curve expiries must not precede the anchor date")

    def price_at(self, t: datetime) -> float:
        if t < self.anchor:
            raise DataError(f"curve does not cover {t} (before anchor {self.anchor})")
        idx = bisect_left(self.expiries, t)
        if idx >= len(self.expiries):
            raise DataError(f"curve does not cover {t} (past last expiry)")
        return float(self.prices[idx])


# --- closed-form integrals -----------------------------------------------------

def _eint(c: float, d0: float, d1: float) -> float:
    """Integral of exp(c*u) du over [d0, d1], stable near c = 0."""
    length = d1 - d0
    if length == 0.0:
        return 0.0
    x = c * length
    if abs(x) < 1e-10:
        return length * math.exp(c * d0) * (1.0 + 0.5 * x)
    return math.exp(c * d0) * math.expm1(x) / c


def v_squared(a: float, sigma_by_month: dict, t0: datetime, t1: datetime) -> float:
    """Integrated decayed variance V^2 = int_{t0}^{t1} e^{-2a(t1-u)} sigma_u^2 du.

    sigma is piecewise constant per calendar month, so the integral is an
    exact sum over month segments; the a -> 0 limit is handled analytically.
    """
    if t1 <= t0:
        raise DataError("v_squared requires t1 > t0")
    if a < 0:
        raise DataError("mean-reversion rate must be nonnegative")
    total = 0.0
    for seg_start, seg_end, month in _month_segments(t0, t1):
        try:
            sig = sigma_by_month[month]
        except KeyError:
            raise DataError(f"no volatility for month {month}") from None
        tau_near = year_fraction(seg_end, t1) if seg_end < t1 else 0.0
        length = year_fraction(seg_start, seg_end)
        # int e^{-2a tau} d tau for tau in [tau_near, tau_near + length]
        total += sig * sig * _eint(-2.0 * a, tau_near, tau_near + length)
    return total


def forward_curve_evolve(curve: ForwardCurve, s_t: float, t: datetime, T: datetime,
                         a: float, sigma_by_month: dict) -> float:
    """Forward price F(t, T) implied by the spot level under the one-factor model.

    F(t,T) = F(0,T) exp(.5 (1-e^{-a(T-t)}) e^{-a(T-t)} V^2(0,t)) (S_t/F(0,t))^{e^{-a(T-t)}}
    """
    if T < t or t < curve.anchor:
        raise DataError("need anchor <= t <= T")
    f0t = curve.price_at(t)
    f0T = curve.price_at(T)
    if f0t <= 0:
        raise DataError("nonpositive forward at t")
    decay = 1.0 if T == t else math.exp(-a * year_fraction(t, T))
    v2 = v_squared(a, sigma_by_month, curve.anchor, t) if t > curve.anchor else 0.0
    return f0T * math.exp(0.5 * (1.0 - decay) * decay * v2) * (s_t / f0t) ** decay


# --- one-factor engines ---------------------------------------------------------

def simulate_mr(curve: ForwardCurve, a: float, sigma_by_month: dict,
                grid: tuple[datetime, ...], n_paths: int, seed: int) -> np.ndarray:
    """Risk-neutral one-factor paths S_t = F(0,t) exp(-V^2(0,t)/2 + G_t).

    G accumulates the decayed stochastic integral exactly one grid step at
    a time (the step increment is Gaussian with a closed-form variance),
    so there is no discretization bias. Returns (n_paths, len(grid)).
    """
    if n_paths < 1:
        raise DataError("need at least one path")
    grid = tuple(grid)
    if any(b <= a_ for a_, b in zip(grid, grid[1:])):
        raise DataError("grid must be strictly increasing")
    if grid[0] < curve.anchor:
        raise DataError("grid starts before the curve anchor")
    n_steps = len(grid) - 1
    f0 = np.array([curve.price_at(t) for t in grid])
    decays = np.empty(n_steps)
    step_var = np.empty(n_steps)
    for k in range(n_steps):
        decays[k] = math.exp(-a * year_fraction(grid[k], grid[k + 1]))
        step_var[k] = v_squared(a, sigma_by_month, grid[k], grid[k + 1])
    v2_0 = 0.0 if grid[0] == curve.anchor else v_squared(a, sigma_by_month, curve.anchor, grid[0])
    v2 = np.empty(len(grid))
    v2[0] = v2_0
    for k in range(n_steps):
        v2[k + 1] = decays[k] ** 2 * v2[k] + step_var[k]
    out = np.empty((n_paths, len(grid)))
    n_draws = len(grid)
    for start, count in _path_chunks(n_paths, n_draws):
        z = _path_normals(seed, start, count, n_draws)
        g = math.sqrt(v2_0) * z[:, 0]
        out[start:start + count, 0] = f0[0] * np.exp(-0.5 * v2[0] + g)
        for k in range(n_steps):
            g = g * decays[k] + math.sqrt(step_var[k]) * z[:, k + 1]
            out[start:start + count, k + 1] = f0[k + 1] * np.exp(-0.5 * v2[k + 1] + g)
    return out


def simulate_mr_realworld(a: float, theta: dict, sigma_by_month: dict,
                          grid: tuple[datetime, ...], x0: float, n_paths: int,
                          seed: int, return_draws: bool = False):
    """Real-world one-factor paths of X via the exact recursion.

    X_{k+1} = eta X_k + theta_{(m,y)} kappa + sigma_m gamma eps_k, with
    buckets taken from each step's start. Returns (n_paths, len(grid)),
    plus the eps draws when asked (for round-trip tests).
    """
    from .mrcal import _coef_arrays  # late import to avoid a cycle

    grid = tuple(grid)
    n_steps = len(grid) - 1
    if n_steps < 1:
        raise DataError("grid needs at least 2 points")
    dt = np.array([year_fraction(t, u) for t, u in zip(grid, grid[1:])])
    eta, kappa, gamma = _coef_arrays(a, dt)
    drift = np.empty(n_steps)
    vol = np.empty(n_steps)
    for k, t in enumerate(grid[:-1]):
        key = (t.month, t.year)
        if key not in theta:
            raise DataError(f"no level parameter for bucket {key}")
        if t.month not in sigma_by_month:
            raise DataError(f"no volatility for month {t.month}")
        drift[k] = theta[key] * kappa[k]
        vol[k] = sigma_by_month[t.month] * gamma[k]
    out = np.empty((n_paths, len(grid)))
    draws = np.empty((n_paths, n_steps)) if return_draws else None
    for start, count in _path_chunks(n_paths, n_steps):
        z = _path_normals(seed, start, count, n_steps)
        if return_draws:
            draws[start:start + count] = z
        x = np.full(count, float(x0))
        out[start:start + count, 0] = x
        for k in range(n_steps):
            x = eta[k] * x + drift[k] + vol[k] * z[:, k]
            out[start:start + count, k + 1] = x
    if return_draws:
        return out, draws
    return out


# --- two-factor (Spot-Prompt) engines -------------------------------------------

def _rho_of_month(rho, month: int) -> float:
    if isinstance(rho, dict):
        try:
            return float(rho[month])
        except KeyError:
            raise DataError(f"no correlation for month {month}") from None
    return float(rho)


def _quotient_vol(sig_s: float, sig_i: float, rho: float) -> float:
    v = sig_s * sig_s + sig_i * sig_i - 2.0 * sig_s * sig_i * rho
    return math.sqrt(max(v, 0.0))


def sp_theta(a: float, sigma_s_by_month: dict, sigma_i_by_month: dict, rho,
             Ti: datetime, t: datetime, t_next: datetime | None = None) -> float:
    """Risk-neutral level theta(t) = V(T_i, t)/2 - sigma_S(t)^2/(2a) inside a month window.

    V(T_i, t) integrates sigma^2(u) = sigma_S^2 + sigma_I^2 - 2 sigma_S sigma_I rho
    piecewise per calendar month.
    """
    if a <= 0:
        raise DataError("sp_theta requires a positive mean-reversion rate")
    if t < Ti:
        raise DataError("t must not precede the window start")
    if t_next is not None and t >= t_next:
        raise DataError("t must precede the next roll date")
    v = 0.0
    if t > Ti:
        for seg_start, seg_end, month in _month_segments(Ti, t):
            sig_s = sigma_s_by_month[month]
            sig_i = sigma_i_by_month[month]
            r = _rho_of_month(rho, month)
            sig2 = sig_s * sig_s + sig_i * sig_i - 2.0 * sig_s * sig_i * r
            v += sig2 * year_fraction(seg_start, seg_end)
    sig_s_t = sigma_s_by_month[t.month]
    return 0.5 * v - sig_s_t * sig_s_t / (2.0 * a)


def _gauss_factor(cov: np.ndarray) -> np.ndarray:
    """Factor F with F F^T = cov; Cholesky when possible, eigen fallback."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def simulate_sp(curve: ForwardCurve, a: float, sigma_s_by_month: dict,
                sigma_i_by_month: dict, rho, roll_dates, grid: tuple[datetime, ...],
                n_paths: int, seed: int, b: float = 0.0,
                s0: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Risk-neutral Spot-Prompt paths; returns (spot, index), each (n_paths, len(grid)).

    The rolling prompt is the contract expiring at the next roll date; all
    contracts share one Brownian driver with Samuelson damping
    sigma_F(t, T_j) = exp(-b (T_j - t)) sigma_I(month of T_j), so each
    contract's value is an exact function of one accumulated integral. At
    a roll the index jumps to the next contract and the spot resets to the
    expiring contract's final value, which pins the expected spot over each
    window at the just-expired prompt. Within a window the spot is the
    window-start value times exp(-w(t)/2 + N_t) with N built from three
    exactly sampled kernel integrals, so the conditional law is exact for
    any grid. At a roll date the recorded index (and spot) is the expiring
    contract's final value.
    """
    if a <= 0:
        raise DataError("simulate_sp requires a positive mean-reversion rate")
    if b < 0:
        raise DataError("forward mean-reversion rate b must be nonnegative")
    grid = tuple(grid)
    if len(grid) < 1:
        raise DataError("empty grid")
    t0 = grid[0]
    rolls = sorted(t for t in roll_dates if t > t0)
    if not rolls:
        raise DataError("need at least one roll date after the grid start")
    if rolls[-1] < grid[-1]:
        raise DataError("roll dates must extend to the end of the grid")

    grid_set = set(grid)
    roll_set = {r for r in rolls if r <= grid[-1]}
    month_marks = set()
    cur = t0
    while cur < grid[-1]:
        cur = _next_month_start(cur)
        if cur < grid[-1]:
            month_marks.add(cur)
    events = sorted(grid_set | roll_set | month_marks)

    def xof(t: datetime) -> float:
        return 0.0 if t == t0 else year_fraction(t0, t)

    def contract_h(T: datetime) -> float:
        if T.month not in sigma_i_by_month:
            raise DataError(f"no index volatility for month {T.month}")
        return sigma_i_by_month[T.month] * math.exp(-b * xof(T))

    # Deterministic pass: turn the event timeline into a flat op program.
    # Ordering at an event: advance, reset spot at a roll, record the grid
    # point (so a grid point on a roll reads the pre-roll index), then
    # switch the prompt to the next contract.
    program: list[tuple] = [("record",)]  # grid[0] is recorded from the initial state
    roll_idx = 0
    prompt_T = rolls[0]
    h = contract_h(prompt_T)
    h_first = h
    x_anchor = 0.0
    logF0_prompt = math.log(curve.price_at(prompt_T))
    prev = t0
    for e in events[1:]:
        d0 = xof(prev) - x_anchor
        d1 = xof(e) - x_anchor
        sig_s = sigma_s_by_month.get(prev.month)
        if sig_s is None:
            raise DataError(f"no spot volatility for month {prev.month}")
        r = _rho_of_month(rho, prev.month)
        g = h * math.exp(b * x_anchor)
        vA = sig_s * sig_s * _eint(2.0 * a, d0, d1)
        vR = _eint(2.0 * a + 2.0 * b, d0, d1)
        vB = _eint(2.0 * b, d0, d1)
        cAR = r * sig_s * _eint(2.0 * a + b, d0, d1)
        cAB = r * sig_s * _eint(a + b, d0, d1)
        cRB = _eint(a + 2.0 * b, d0, d1)
        cov = np.array([[vA, cAR, cAB], [cAR, vR, cRB], [cAB, cRB, vB]])
        program.append(("step", _gauss_factor(cov), vA, vR, vB, cAR, cAB, cRB,
                        g, -0.5 * g * g * vB, d1, math.exp(b * x_anchor)))
        if e in roll_set:
            program.append(("roll",))
        if e in grid_set:
            program.append(("record",))
        if e in roll_set and e != events[-1]:
            roll_idx += 1
            if roll_idx >= len(rolls):
                raise DataError("ran out of roll dates before the grid end")
            prompt_T = rolls[roll_idx]
            h = contract_h(prompt_T)
            x_anchor = xof(e)
            program.append(("newwindow", h, h * math.exp(b * x_anchor),
                            math.log(curve.price_at(prompt_T)),
                            h * h * _eint(2.0 * b, 0.0, x_anchor)))
        prev = e

    n_draws = 3 * (len(events) - 1)
    if s0 is None:
        s0 = curve.price_at(t0)
    if s0 <= 0:
        raise DataError("initial spot must be positive")

    spot = np.empty((n_paths, len(grid)))
    index = np.empty((n_paths, len(grid)))
    g0 = h_first  # first window is anchored at t0, so its g equals h
    for start, count in _path_chunks(n_paths, max(1, n_draws)):
        z = _path_normals(seed, start, count, n_draws)
        logS_anchor = np.full(count, math.log(s0))
        logI = np.full(count, logF0_prompt)
        A = np.zeros(count)
        R = np.zeros(count)
        Bw = np.zeros(count)
        Btilde = np.zeros(count)
        svA = svR = svB = scAR = scAB = scRB = 0.0
        cur_g = g0
        cur_d = 0.0
        col = 0
        rec = 0
        for op in program:
            if op[0] == "step":
                _, fac, vA, vR, vB, cAR, cAB, cRB, g_step, di_drift, d1, ebxa = op
                dz = z[:, col:col + 3] @ fac.T
                col += 3
                A += dz[:, 0]
                R += dz[:, 1]
                Bw += dz[:, 2]
                Btilde += ebxa * dz[:, 2]
                svA += vA; svR += vR; svB += vB
                scAR += cAR; scAB += cAB; scRB += cRB
                logI = logI + di_drift + g_step * dz[:, 2]
                cur_g = g_step
                cur_d = d1
            elif op[0] == "roll":
                logS_anchor = logI.copy()
                A.fill(0.0); R.fill(0.0); Bw.fill(0.0)
                svA = svR = svB = scAR = scAB = scRB = 0.0
                cur_d = 0.0
            elif op[0] == "newwindow":
                _, h_new, g_new, logf0_new, var0_new = op
                logI = logf0_new - 0.5 * var0_new + h_new * Btilde
                cur_g = g_new
            else:  # record
                ead = math.exp(-a * cur_d)
                w = (ead * ead * (svA + cur_g * cur_g * svR - 2.0 * cur_g * scAR)
                     + cur_g * cur_g * svB
                     + 2.0 * ead * (cur_g * scAB - cur_g * cur_g * scRB))
                n_part = ead * (A - cur_g * R) + cur_g * Bw
                spot[start:start + count, rec] = np.exp(logS_anchor - 0.5 * w + n_part)
                index[start:start + count, rec] = np.exp(logI)
                rec += 1
    return spot, index


def simulate_sp_realworld(a: float, theta_q: dict, mu: dict, sigma_s_by_month: dict,
                          sigma_i_by_month: dict, rho, grid: tuple[datetime, ...],
                          x0: float, y0: float, n_paths: int, seed: int,
                          return_draws: bool = False):
    """Real-world Spot-Prompt data generator: exact quotient OU plus index GBM.

    X = log(S/I) follows the one-factor recursion with the quotient
    volatility; Y = log I is a drifting random walk. The two per-step
    noises carry the exact correlation rho_tilde * kappa/(gamma sqrt(dt)).
    Returns (spot, index) price paths, plus the (nu, xi) draws when asked.
    """
    from .mrcal import _coef_arrays

    grid = tuple(grid)
    n_steps = len(grid) - 1
    if n_steps < 1:
        raise DataError("grid needs at least 2 points")
    dt = np.array([year_fraction(t, u) for t, u in zip(grid, grid[1:])])
    eta, kappa, gamma = _coef_arrays(a, dt)
    drift_q = np.empty(n_steps)
    vol_q = np.empty(n_steps)
    drift_y = np.empty(n_steps)
    vol_y = np.empty(n_steps)
    corr = np.empty(n_steps)
    for k, t in enumerate(grid[:-1]):
        key = (t.month, t.year)
        sig_s = sigma_s_by_month[t.month]
        sig_i = sigma_i_by_month[t.month]
        r = _rho_of_month(rho, t.month)
        sig_q = _quotient_vol(sig_s, sig_i, r)
        if sig_q <= 0:
            raise DataError(f"degenerate quotient volatility in month {t.month}")
        rho_tilde = (sig_s * r - sig_i) / sig_q
        drift_q[k] = theta_q[key] * kappa[k]
        vol_q[k] = sig_q * gamma[k]
        drift_y[k] = mu[key] * dt[k]
        vol_y[k] = sig_i * math.sqrt(dt[k])
        corr[k] = rho_tilde * kappa[k] / (gamma[k] * math.sqrt(dt[k]))
    resid = np.sqrt(np.clip(1.0 - corr * corr, 0.0, None))
    spot = np.empty((n_paths, len(grid)))
    index = np.empty((n_paths, len(grid)))
    draws = np.empty((n_paths, 2 * n_steps)) if return_draws else None
    for start, count in _path_chunks(n_paths, 2 * n_steps):
        z = _path_normals(seed, start, count, 2 * n_steps)
        x = np.full(count, float(x0))
        y = np.full(count, float(y0))
        spot[start:start + count, 0] = np.exp(x + y)
        index[start:start + count, 0] = np.exp(y)
        for k in range(n_steps):
            z_xi = z[:, 2 * k]
            z_nu = corr[k] * z_xi + resid[k] * z[:, 2 * k + 1]
            if return_draws:
                draws[start:start + count, 2 * k] = z_nu
                draws[start:start + count, 2 * k + 1] = z_xi
            x = eta[k] * x + drift_q[k] + vol_q[k] * z_nu
            y = y + drift_y[k] + vol_y[k] * z_xi
            spot[start:start + count, k + 1] = np.exp(x + y)
            index[start:start + count, k + 1] = np.exp(y)
    if return_draws:
        return spot, index, draws
    return spot, index


# --- joint simulation -------------------------------------------------------

def repair_correlation(matrix: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Clip negative eigenvalues and renormalize to unit diagonal.

    Returns (matrix, smallest original eigenvalue, repaired flag); the
    input is returned untouched when it is already positive semidefinite.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DataError("correlation matrix must be square")
    if not np.allclose(matrix, matrix.T, atol=1e-12):
        raise DataError("correlation matrix must be symmetric")
    w, v = np.linalg.eigh(matrix)
    min_eig = float(w[0])
    if min_eig >= -1e-12:
        return matrix, min_eig, False
    w = np.clip(w, 0.0, None)
    fixed = (v * w) @ v.T
    d = np.sqrt(np.diag(fixed))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return fixed, min_eig, True


@dataclass(frozen=True)
class MRMember:
    """One-factor member of a joint simulation (one spot factor)."""

    label: str
    a: float
    theta: dict
    sigma: dict
    x0: float
    transform: str = "log"


@dataclass(frozen=True)
class SPMember:
    """Spot-Prompt member of a joint simulation (spot and index factors)."""

    label: str
    a: float
    theta_q: dict
    mu: dict
    sigma_s: dict
    sigma_i: dict
    x0: float
    y0: float


def joint_factor_labels(members) -> tuple[str, ...]:
    """Factor order of a joint simulation: per member, spot then (for SP) index."""
    labels: list[str] = []
    for m in members:
        labels.append(f"{m.label}:spot")
        if isinstance(m, SPMember):
            labels.append(f"{m.label}:index")
    return tuple(labels)


def simulate_joint(members, corr_by_bucket, grid: tuple[datetime, ...], n_paths: int,
                   seed: int, granularity: str = "flat"):
    """Correlated joint paths for a list of MR and SP members.

    corr_by_bucket maps bucket keys (per the granularity) to correlation
    matrices over joint_factor_labels(members); None means independence.
    Non-PSD bucket matrices are repaired by eigenvalue clipping and
    reported, never silently. Returns (paths dict, repairs dict).

    Per step, the spot noise of an SP member mixes its two factors as
    (sigma_S z_W - sigma_I z_B)/sigma_q, the same identification the factor
    extraction inverts, so joint round trips recover z_W exactly.
    """
    from .mrcal import _coef_arrays
    from .timeseries import month_bucket_key

    grid = tuple(grid)
    n_steps = len(grid) - 1
    if n_steps < 1:
        raise DataError("grid needs at least 2 points")
    labels = joint_factor_labels(members)
    nf = len(labels)
    member_labels = [m.label for m in members]
    if len(set(member_labels)) != len(member_labels):
        raise DataError("member labels must be unique")

    dt = np.array([year_fraction(t, u) for t, u in zip(grid, grid[1:])])
    bucket_of_step = [month_bucket_key(t.month, granularity) for t in grid[:-1]]
    needed = sorted(set(bucket_of_step), key=str)
    factors = {}
    repairs = {}
    for key in needed:
        if corr_by_bucket is None:
            mat = np.eye(nf)
        else:
            try:
                mat = np.asarray(corr_by_bucket[key], dtype=float)
            except KeyError:
                raise DataError(f"no correlation matrix for bucket {key!r}") from None
        if mat.shape != (nf, nf):
            raise DataError(
                f"bucket {key!r}: matrix shape {mat.shape} does not match {nf} factors")
        fixed, min_eig, was_repaired = repair_correlation(mat)
        repairs[key] = {"min_eigenvalue": min_eig, "repaired": was_repaired}
        factors[key] = (_gauss_factor(fixed), fixed)

    # per-member step tables
    tables = []
    offset = 0
    for m in members:
        eta, kappa, gamma = _coef_arrays(m.a, dt)
        if isinstance(m, SPMember):
            tab = {"kind": "sp", "eta": eta, "kappa": kappa, "gamma": gamma,
                   "iw": offset, "ib": offset + 1}
            rows = []
            for k, t in enumerate(grid[:-1]):
                key = (t.month, t.year)
                sig_s = m.sigma_s[t.month]
                sig_i = m.sigma_i[t.month]
                rho_b = float(factors[bucket_of_step[k]][1][offset, offset + 1])
                sig_q = _quotient_vol(sig_s, sig_i, rho_b)
                if sig_q <= 0:
                    raise DataError(f"member {m.label}: degenerate quotient vol at step {k}")
                rows.append((m.theta_q[key] * kappa[k], sig_q * gamma[k],
                             sig_s / sig_q, sig_i / sig_q,
                             m.mu[key] * dt[k], sig_i * math.sqrt(dt[k])))
            tab["rows"] = rows
            offset += 2
        else:
            rows = []
            for k, t in enumerate(grid[:-1]):
                key = (t.month, t.year)
                rows.append((m.theta[key] * kappa[k], m.sigma[t.month] * gamma[k]))
            tab = {"kind": "mr", "eta": eta, "iw": offset, "rows": rows}
            offset += 1
        tables.append(tab)

    out = {}
    for m in members:
        out[m.label] = np.empty((n_paths, len(grid)))
        if isinstance(m, SPMember):
            out[f"{m.label}.index"] = np.empty((n_paths, len(grid)))

    n_draws = nf * n_steps
    for start, count in _path_chunks(n_paths, n_draws):
        zmat = _path_normals(seed, start, count, n_draws)
        states = []
        for m, tab in zip(members, tables):
            if tab["kind"] == "sp":
                states.append([np.full(count, float(m.x0)), np.full(count, float(m.y0))])
                out[m.label][start:start + count, 0] = np.exp(states[-1][0] + states[-1][1])
                out[f"{m.label}.index"][start:start + count, 0] = np.exp(states[-1][1])
            else:
                states.append([np.full(count, float(m.x0))])
                x = states[-1][0]
                out[m.label][start:start + count, 0] = np.exp(x) if m.transform == "log" else x
        for k in range(n_steps):
            fac = factors[bucket_of_step[k]][0]
            z = zmat[:, nf * k: nf * (k + 1)] @ fac.T
            for m, tab, st in zip(members, tables, states):
                if tab["kind"] == "sp":
                    drift_q, volq_g, ws, wi, drift_y, vol_y = tab["rows"][k]
                    z_w = z[:, tab["iw"]]
                    z_b = z[:, tab["ib"]]
                    z_mix = ws * z_w - wi * z_b
                    st[0] = tab["eta"][k] * st[0] + drift_q + volq_g * z_mix
                    st[1] = st[1] + drift_y + vol_y * z_b
                    out[m.label][start:start + count, k + 1] = np.exp(st[0] + st[1])
                    out[f"{m.label}.index"][start:start + count, k + 1] = np.exp(st[1])
                else:
                    drift, vol_g = tab["rows"][k]
                    st[0] = tab["eta"][k] * st[0] + drift + vol_g * z[:, tab["iw"]]
                    x = st[0]
                    out[m.label][start:start + count, k + 1] = (
                        np.exp(x) if m.transform == "log" else x)
    return out, repairs


# --- path output --------------------------------------------------------------

_BIN_MAGIC = b"ENERCAL1"


def write_paths_csv(path, grid, paths: np.ndarray) -> None:
    """Wide CSV: date column first, then one column per path, 17 significant digits."""
    paths = np.asarray(paths)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("date," + ",".join(f"path_{i:05d}" for i in range(paths.shape[0])) + "\n")
        for k, t in enumerate(grid):
            f.write(t.isoformat() + "," +
                    ",".join(format(v, ".17g") for v in paths[:, k]) + "\n")


def write_paths_bin(path, grid, paths: np.ndarray, seed: int, spec_hash: bytes) -> None:
    """Compact binary matrix: magic, dims, seed, 32-byte spec hash, epoch times, float64 data."""
    paths = np.ascontiguousarray(paths, dtype=np.float64)
    if len(spec_hash) != 32:
        raise DataError("spec hash must be 32 bytes")
    times = np.array([int(t.timestamp()) for t in grid], dtype="<i8")
    with open(path, "wb") as f:
        f.write(_BIN_MAGIC)
        f.write(struct.pack("<QQQ", len(grid), paths.shape[0], seed & 0xFFFFFFFFFFFFFFFF))
        f.write(spec_hash)
        f.write(times.tobytes())
        f.write(paths.astype("<f8").tobytes())


def read_paths_bin(path):
    """Inverse of write_paths_bin; returns (times, paths, seed, spec_hash)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _BIN_MAGIC:
            raise DataError("not an enercal path file")
        n_times, n_paths, seed = struct.unpack("<QQQ", f.read(24))
        spec_hash = f.read(32)
        times = np.frombuffer(f.read(8 * n_times), dtype="<i8")
        data = np.frombuffer(f.read(8 * n_times * n_paths), dtype="<f8")
    grid = tuple(datetime.fromtimestamp(int(t)) for t in times)
    return grid, data.reshape(n_paths, n_times), seed, spec_hash


def spec_digest(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()
