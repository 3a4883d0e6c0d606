"""Time-series diagnostics for simulated market output.

Log returns, autocorrelation (biased estimator, so values stay within
[-1, 1]), normal QQ data, excess kurtosis, the population noise-impact
measure d_gamma, and per-group aggregated wealth.  All functions are
pure over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParameterError
from .model import AgentPool


@dataclass
class SeriesStats:
    """Mean, variance (sample, ddof=1), and excess kurtosis of a series.

    Kurtosis is None for fewer than 4 points, variance needs 2.
    """

    mean: float
    variance: float
    excess_kurtosis: float | None
    length: int


def log_returns(prices) -> np.ndarray:
    """Log returns ln(S_{t+1} / S_t) of a positive price series."""
    p = np.asarray(prices, dtype=np.float64)
    if p.size < 2:
        raise ParameterError(f"need at least 2 prices, got {p.size}")
    if np.any(p <= 0):
        raise DomainError("log returns require strictly positive prices")
    return np.diff(np.log(p))


def autocorrelation(series, max_lag: int) -> np.ndarray:
    """Autocorrelation at lags 0..max_lag (biased estimator).

    The denominator is the full-series sum of squared deviations, which
    keeps every value in [-1, 1]; lag 0 is exactly 1.
    """
    y = np.asarray(series, dtype=np.float64)
    if max_lag < 0:
        raise ParameterError(f"max_lag must be >= 0, got {max_lag}")
    if y.size < max_lag + 2:
        raise ParameterError(
            f"series of length {y.size} too short for max_lag = {max_lag}"
        )
    d = y - y.mean()
    denom = float(np.dot(d, d))
    if denom == 0.0:
        raise DomainError("autocorrelation undefined for a constant series")
    out = np.empty(max_lag + 1, dtype=np.float64)
    out[0] = 1.0
    for lag in range(1, max_lag + 1):
        out[lag] = float(np.dot(d[:-lag], d[lag:])) / denom
    return out


# Acklam's rational approximation of the standard normal inverse CDF;
# relative error below 1.2e-9 over (0, 1).
_ICDF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
           1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ICDF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
           6.680131188771972e+01, -1.328068155288572e+01)
_ICDF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
           -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ICDF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
           3.754408661907416e+00)
_ICDF_PLOW = 0.02425


def normal_quantile(p) -> np.ndarray | float:
    """Standard normal inverse CDF, accurate to better than 1e-8."""
    arr = np.asarray(p, dtype=np.float64)
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError("normal quantile requires 0 < p < 1")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    out = np.empty_like(arr)

    low = arr < _ICDF_PLOW
    high = arr > 1.0 - _ICDF_PLOW
    mid = ~(low | high)

    if np.any(mid):
        q = arr[mid] - 0.5
        s = q * q
        num = ((((a[0] * s + a[1]) * s + a[2]) * s + a[3]) * s + a[4]) * s + a[5]
        den = ((((b[0] * s + b[1]) * s + b[2]) * s + b[3]) * s + b[4]) * s + 1.0
        out[mid] = num * q / den
    if np.any(low):
        q = np.sqrt(-2.0 * np.log(arr[low]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        out[low] = num / den
    if np.any(high):
        q = np.sqrt(-2.0 * np.log(1.0 - arr[high]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        out[high] = -num / den
    if out.ndim == 0:
        return float(out)
    return out


def qq_data(series) -> np.ndarray:
    """Normal QQ pairs: column 0 theoretical quantiles, column 1 the
    sorted standardized sample, at Hazen plotting positions (i - 0.5)/n."""
    y = np.asarray(series, dtype=np.float64)
    if y.size < 2:
        raise ParameterError(f"need at least 2 points, got {y.size}")
    std = float(y.std())
    if std == 0.0:
        raise DomainError("QQ data undefined for a zero-variance series")
    empirical = np.sort((y - y.mean()) / std)
    positions = (np.arange(1, y.size + 1) - 0.5) / y.size
    theoretical = normal_quantile(positions)
    return np.column_stack([theoretical, empirical])


def excess_kurtosis(series) -> float:
    """m4 / m2**2 - 3 with central sample moments."""
    y = np.asarray(series, dtype=np.float64)
    if y.size < 4:
        raise ParameterError(f"need at least 4 points, got {y.size}")
    d = y - y.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        raise DomainError("excess kurtosis undefined for a zero-variance series")
    m4 = float(np.mean(d ** 4))
    return m4 / (m2 * m2) - 3.0


def d_gamma(gammas_star, gammas_noised) -> float:
    """Absolute difference of the mean investment fraction before and
    after noising.  Not additive in the noise because of the cutoff."""
    star = np.asarray(gammas_star, dtype=np.float64)
    noised = np.asarray(gammas_noised, dtype=np.float64)
    if star.size != noised.size:
        raise ParameterError(
            f"length mismatch: {star.size} pre-noise vs {noised.size} noised"
        )
    if star.size == 0:
        raise ParameterError("need at least one agent")
    return abs(float(np.mean(noised)) - float(np.mean(star)))


def group_wealth(pool: AgentPool, group_count: int) -> np.ndarray:
    """Total wealth per memory group."""
    if pool.n and int(pool.group_id.max()) >= group_count:
        raise ParameterError(
            f"group id {int(pool.group_id.max())} outside 0..{group_count - 1}"
        )
    return np.bincount(pool.group_id, weights=pool.w, minlength=group_count)


def series_stats(series) -> SeriesStats:
    """Summary statistics of a series (kurtosis only when defined)."""
    y = np.asarray(series, dtype=np.float64)
    if y.size < 2:
        raise ParameterError(f"need at least 2 points, got {y.size}")
    kurt = None
    if y.size >= 4 and float(y.std()) > 0.0:
        kurt = excess_kurtosis(y)
    return SeriesStats(
        mean=float(y.mean()),
        variance=float(y.var(ddof=1)),
        excess_kurtosis=kurt,
        length=int(y.size),
    )
