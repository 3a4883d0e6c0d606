"""Market clearing: excess demand, price solvers, and the time step.

The clearing price makes aggregate stock demand ``sum(gamma_i * w_i / S)``
equal the fixed supply ``n``.  Because next-step wealth is linear in the
price, ``w_i(S) = A_i + B_i * S``, the clearing condition has a closed
form once the investment fractions are fixed (explicit mode).  Iterative
mode instead mimics the original mechanism: investment fractions are
re-optimized at each hypothetical price (the newest window entry is
replaced by the hypothetical return) and a bracketed bisection stops as
soon as the absolute excess demand falls below the tolerance ``xi``.

By default the current dividend enters the wealth coefficients, which
makes the explicit price clear the market to machine precision; setting
``dividend_lag`` uses the previous dividend instead, which breaks exact
stock conservation and is kept only for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ClearanceError, NumericError
from .model import (
    MODE_EXPLICIT,
    MODE_ITERATIVE,
    AgentPool,
    MarketState,
    ModelParams,
    _optimal_gamma_window,
    cutoff_H,
    dividend_step,
    stock_return,
    wealth_step,
)
from .rng import RngStream

# Explicit clearing must hold to machine precision, relative to supply.
EXPLICIT_RESIDUAL_TOL = 1e-9

MAX_BRACKET_EXPANSIONS = 60
MAX_BISECTIONS = 200


@dataclass
class ClearanceResult:
    """Outcome of one price determination."""

    S_new: float        # accepted price, > 0
    residual: float     # signed excess stock demand at S_new
    iterations: int     # candidate evaluations beyond the first
    mode: str           # "explicit" or "iterative"


@dataclass
class StepRecord:
    """Per-step observables emitted by simulation_step."""

    t: int
    S: float
    D: float
    x: float
    mean_gamma_star: float
    mean_gamma: float
    d_gamma: float
    residual: float
    iterations: int


def wealth_coefficients(
    w_prev: np.ndarray,
    gammas_prev: np.ndarray,
    S_prev: float,
    D_cur: float,
    r: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent (A, B) with next wealth w(S) = A + B * S.

    A_i = w_i * (1 + (1 - g_i) * r + g_i * (D - S_prev) / S_prev),
    B_i = w_i * g_i / S_prev.
    """
    A = w_prev * (1.0 + (1.0 - gammas_prev) * r + gammas_prev * (D_cur - S_prev) / S_prev)
    B = w_prev * gammas_prev / S_prev
    return A, B


def excess_demand(
    S_h: float,
    gammas: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
    n_total: float,
) -> float:
    """Aggregate stock demand at hypothetical price S_h minus supply."""
    if S_h <= 0:
        raise ClearanceError(f"hypothetical price must be > 0, got {S_h}")
    return float(np.sum(gammas * A) / S_h + np.sum(gammas * B) - n_total)


def solve_price_explicit(
    gammas_new: np.ndarray,
    w_prev: np.ndarray,
    gammas_prev: np.ndarray,
    S_prev: float,
    D_cur: float,
    r: float,
    n_total: float,
    dividend_lag: bool = False,
    D_prev: float = 0.0,
) -> ClearanceResult:
    """Closed-form clearing price for fixed new investment fractions.

    S = (sum(g_new * A) / n) / (1 - sum(g_new * B) / n).  A non-positive
    denominator means demand cannot be met at any price.
    """
    d_for_A = D_prev if dividend_lag else D_cur
    A, B = wealth_coefficients(w_prev, gammas_prev, S_prev, d_for_A, r)
    demand_A = float(np.sum(gammas_new * A))
    demand_B = float(np.sum(gammas_new * B))
    numerator = demand_A / n_total
    denominator = 1.0 - demand_B / n_total
    if not math.isfinite(numerator) or not math.isfinite(denominator):
        raise NumericError("non-finite aggregate in explicit price formula")
    if denominator <= 0.0:
        raise ClearanceError(
            "market cannot clear: aggregate gamma-weighted holdings exceed supply",
            denominator=denominator,
            gamma_weighted_holdings=demand_B / n_total,
        )
    S_new = numerator / denominator
    if S_new <= 0.0 or not math.isfinite(S_new):
        raise ClearanceError(
            f"explicit clearing produced non-positive price {S_new}",
            denominator=denominator,
        )
    residual = demand_A / S_new + demand_B - n_total
    return ClearanceResult(S_new=S_new, residual=residual, iterations=0, mode=MODE_EXPLICIT)


def _gamma_star_by_group(
    market: MarketState,
    params: ModelParams,
    hypothetical_x: float | None = None,
) -> np.ndarray:
    """Optimal fractions, one entry per agent (group-shared windows).

    With ``hypothetical_x`` set, the newest window entry is replaced by
    it, as the iterative mechanism requires.
    """
    out = np.empty(params.N, dtype=np.float64)
    for start, stop, m in params.group_ranges():
        window = market.recent(m)
        if hypothetical_x is not None:
            window = window.copy()
            window[-1] = hypothetical_x
        out[start:stop] = _optimal_gamma_window(
            window, params.r, params.gamma_min, params.gamma_max
        )
    return out


def solve_price_iterative(
    pool: AgentPool,
    market: MarketState,
    params: ModelParams,
    D_cur: float,
) -> tuple[np.ndarray, ClearanceResult]:
    """Hypothetical-price loop stopping at |excess demand| <= tolerance.

    Fractions are re-optimized at every candidate price; the bracket is
    grown geometrically from the previous price until the excess demand
    changes sign, then bisected.  The first candidate within tolerance
    is accepted (the previous price itself may qualify immediately).

    With ``xi_relative`` (the default) the tolerance is ``xi`` stocks per
    stock of supply, i.e. |excess| <= xi * n_total; absolute stock units
    are numerically inert at realistic supplies because a one-stock
    imbalance already pins the price to within S/n_total.
    """
    xi = params.xi * params.n_total if params.xi_relative else params.xi
    S_prev = market.S
    d_for_A = market.D if params.dividend_lag else D_cur
    A, B = wealth_coefficients(pool.w, pool.gamma, S_prev, d_for_A, params.r)

    def evaluate(S_h: float) -> tuple[np.ndarray, float]:
        x_h = stock_return(S_prev, S_h, D_cur)
        gs = _gamma_star_by_group(market, params, hypothetical_x=x_h)
        return gs, excess_demand(S_h, gs, A, B, params.n_total)

    iterations = 0
    gs, e = evaluate(S_prev)
    if abs(e) <= xi:
        return gs, ClearanceResult(S_prev, e, iterations, MODE_ITERATIVE)

    # Expand away from S_prev in the direction that sheds the imbalance:
    # excess demand falls as the price rises.
    factor = 2.0 if e > 0 else 0.5
    lo_S, lo_e = S_prev, e
    hi_S = None
    candidate = S_prev
    for _ in range(MAX_BRACKET_EXPANSIONS):
        candidate *= factor
        iterations += 1
        gs, e_c = evaluate(candidate)
        if abs(e_c) <= xi:
            return gs, ClearanceResult(candidate, e_c, iterations, MODE_ITERATIVE)
        if (e_c > 0) != (lo_e > 0):
            hi_S = candidate
            break
        lo_S, lo_e = candidate, e_c
    if hi_S is None:
        raise ClearanceError(
            f"no sign change in excess demand within {MAX_BRACKET_EXPANSIONS} "
            f"bracket expansions from S = {S_prev}",
            S_prev=S_prev,
            last_candidate=candidate,
            last_excess=lo_e,
        )

    a_S, a_e = lo_S, lo_e
    b_S = hi_S
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (a_S + b_S)
        iterations += 1
        gs, e_m = evaluate(mid)
        if abs(e_m) <= xi:
            return gs, ClearanceResult(mid, e_m, iterations, MODE_ITERATIVE)
        if (e_m > 0) == (a_e > 0):
            a_S, a_e = mid, e_m
        else:
            b_S = mid
    raise ClearanceError(
        f"clearing tolerance xi = {xi} not met within {MAX_BISECTIONS} bisections",
        bracket=(a_S, b_S),
        last_excess=e_m,
    )


def simulation_step(
    pool: AgentPool,
    market: MarketState,
    params: ModelParams,
    stream: RngStream,
) -> StepRecord:
    """Advance the market by one step, mutating pool and market.

    Order: dividend draw, optimal fractions (mode-dependent), noise and
    cutoff, explicit price update with the noised fractions, realized
    return, wealth update, holdings update, history push.
    """
    step_index = market.t + 1
    S_prev = market.S
    D_prev = market.D

    z = stream.next_uniform(params.z1, params.z2)
    D_cur = dividend_step(D_prev, z)
    if not math.isfinite(D_cur):
        raise NumericError("dividend overflowed", step=step_index)

    if params.clearance_mode == MODE_ITERATIVE:
        gammas_star, clearing = solve_price_iterative(pool, market, params, D_cur)
        it_residual, it_iterations = clearing.residual, clearing.iterations
    else:
        gammas_star = _gamma_star_by_group(market, params)
        it_residual, it_iterations = None, 0

    eps = stream.gaussian_array(pool.n, 0.0, params.sigma_gamma)
    gammas_new = cutoff_H(gammas_star + eps)

    result = solve_price_explicit(
        gammas_new,
        pool.w,
        pool.gamma,
        S_prev,
        D_cur,
        params.r,
        params.n_total,
        dividend_lag=params.dividend_lag,
        D_prev=D_prev,
    )
    S_new = result.S_new
    x = stock_return(S_prev, S_new, D_cur)
    w_new = wealth_step(pool.w, pool.gamma, params.r, x)
    if not math.isfinite(x) or not np.all(np.isfinite(w_new)):
        raise NumericError("non-finite state after price update", step=step_index)
    if np.any(w_new <= 0.0):
        raise NumericError("agent wealth became non-positive", step=step_index)

    pool.w = w_new
    pool.gamma_star = gammas_star
    pool.gamma = gammas_new
    pool.n_held = gammas_new * w_new / S_new
    conservation = float(np.sum(pool.n_held)) - params.n_total

    market.S = S_new
    market.D = D_cur
    market.push(x)
    market.t = step_index

    mean_star = float(gammas_star.mean())
    mean_noised = float(gammas_new.mean())
    return StepRecord(
        t=step_index,
        S=S_new,
        D=D_cur,
        x=float(x),
        mean_gamma_star=mean_star,
        mean_gamma=mean_noised,
        d_gamma=abs(mean_noised - mean_star),
        residual=it_residual if it_residual is not None else conservation,
        iterations=it_iterations,
    )
