"""Core state and per-agent dynamics of the LLS market model.

Agents split their wealth between a safe bond paying interest ``r`` per
step and a single risky stock; the fraction ``gamma`` placed in stock is
the solution of a myopic expected-log-utility maximization over each
agent's remembered window of past total returns, clamped to
[0.01, 0.99] and blurred by Gaussian noise.  A multiplicative dividend
process drives the dynamics.

Agent state is stored column-wise (one numpy array per field) in
:class:`AgentPool`; agents with equal memory spans form contiguous
groups and share their optimizer output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, DomainError, NumericError, ParameterError
from .rng import RngStream

GAMMA_MIN = 0.01
GAMMA_MAX = 0.99

# Absolute tolerance of the bisection on the investment fraction.
GAMMA_TOL = 1e-10

MODE_EXPLICIT = "explicit"
MODE_ITERATIVE = "iterative"


@dataclass
class ModelParams:
    """All scalar parameters of one market.

    Defaults are the basic single-group setting; ``preset_3groups``
    builds the heterogeneous-memory variant.  ``n_total`` defaults to
    ``N * n0_per_agent`` so the stock supply scales with the number of
    agents.
    """

    N: int = 100                       # number of agents
    r: float = 0.04                    # risk-free rate per step, in (0, 1)
    z1: float = 0.05                   # dividend growth lower bound
    z2: float = 0.05                   # dividend growth upper bound
    sigma_gamma: float = 0.2           # std-dev of investment-fraction noise
    memory_groups: tuple[tuple[int, int], ...] = ((100, 15),)  # (count, m)
    n_total: float | None = None       # total stock count
    steps: int = 200
    xi: float = 0.1                    # clearance stopping tolerance
    xi_relative: bool = True           # xi measured relative to the stock supply
    clearance_mode: str = MODE_EXPLICIT
    dividend_lag: bool = False         # use previous dividend in the price formula
    gamma_min: float = GAMMA_MIN
    gamma_max: float = GAMMA_MAX
    mu_h: float = 0.0415               # artificial-history return mean
    sigma_h: float = 0.003             # artificial-history return std-dev
    w0: float = 1000.0                 # initial wealth per agent
    n0_per_agent: float = 100.0        # initial stocks per agent
    S0: float = 4.0                    # initial stock price
    D0: float = 0.2                    # initial dividend per stock

    gamma0: float = 0.4                # initial investment fraction

    def __post_init__(self):
        if self.n_total is None:
            self.n_total = float(self.N) * float(self.n0_per_agent)

    @property
    def max_memory(self) -> int:
        return max(m for _, m in self.memory_groups)

    def group_ranges(self) -> list[tuple[int, int, int]]:
        """Contiguous (start, stop, m) index ranges, one per memory group."""
        ranges = []
        start = 0
        for count, m in self.memory_groups:
            ranges.append((start, start + count, m))
            start += count
        return ranges

    def validate(self) -> None:
        """Raise ConfigError on the first violated invariant."""
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}", field="model.N")
        if not 0.0 < self.r < 1.0:
            raise ConfigError(
                f"r = {self.r} out of range; requires 0 < r < 1", field="model.r"
            )
        if self.z1 > self.z2:
            raise ConfigError(
                f"dividend bounds need z1 <= z2, got ({self.z1}, {self.z2})",
                field="model.z1",
            )
        if self.z1 <= -1.0:
            raise ConfigError(
                f"z1 must be > -1, got {self.z1}", field="model.z1"
            )
        if self.sigma_gamma < 0:
            raise ConfigError(
                f"sigma_gamma must be >= 0, got {self.sigma_gamma}",
                field="model.sigma_gamma",
            )
        if not self.memory_groups:
            raise ConfigError("memory_groups must be non-empty", field="model.memory_groups")
        for count, m in self.memory_groups:
            if count < 0:
                raise ConfigError(
                    f"group count must be >= 0, got {count}", field="model.memory_groups"
                )
            if m < 1:
                raise ConfigError(
                    f"memory span must be >= 1, got {m}", field="model.memory_groups"
                )
        total = sum(count for count, _ in self.memory_groups)
        if total != self.N:
            raise ConfigError(
                f"memory group counts sum to {total}, expected N = {self.N}",
                field="model.memory_groups",
            )
        if self.n_total is None or self.n_total <= 0:
            raise ConfigError(
                f"n_total must be > 0, got {self.n_total}", field="model.n_total"
            )
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}", field="model.steps")
        if self.clearance_mode not in (MODE_EXPLICIT, MODE_ITERATIVE):
            raise ConfigError(
                f"clearance mode must be 'explicit' or 'iterative', got "
                f"{self.clearance_mode!r}",
                field="clearance.mode",
            )
        if self.clearance_mode == MODE_ITERATIVE and self.xi <= 0:
            raise ConfigError(
                f"xi must be > 0 in iterative mode, got {self.xi}", field="clearance.xi"
            )
        if self.sigma_h < 0:
            raise ConfigError(
                f"sigma_h must be >= 0, got {self.sigma_h}", field="model.sigma_h"
            )
        if self.w0 <= 0:
            raise ConfigError(f"w0 must be > 0, got {self.w0}", field="model.w0")
        if self.S0 <= 0:
            raise ConfigError(f"S0 must be > 0, got {self.S0}", field="model.S0")
        if self.D0 < 0:
            raise ConfigError(f"D0 must be >= 0, got {self.D0}", field="model.D0")
        if self.n0_per_agent <= 0:
            raise ConfigError(
                f"n0_per_agent must be > 0, got {self.n0_per_agent}",
                field="model.n0_per_agent",
            )
        if not GAMMA_MIN <= self.gamma0 <= GAMMA_MAX:
            raise ConfigError(
                f"gamma0 = {self.gamma0} outside [{GAMMA_MIN}, {GAMMA_MAX}]",
                field="model.gamma0",
            )


def preset_basic() -> ModelParams:
    """Basic setting: 100 homogeneous agents with memory span 15."""
    return ModelParams()


def preset_3groups() -> ModelParams:
    """Three equal groups of 33 agents with memory spans 10/141/256."""
    return ModelParams(
        N=99,
        memory_groups=((33, 10), (33, 141), (33, 256)),
        r=0.0001,
        z1=0.00015,
        z2=0.00015,
        sigma_gamma=0.2,
        steps=20000,
        D0=0.004,
    )


PRESETS = {
    "lls-basic": preset_basic,
    "lls-3groups": preset_3groups,
}


def scale_to_agents(params: ModelParams, n_agents: int) -> ModelParams:
    """Rescale the agent count, keeping group proportions (largest
    remainder) and the per-agent stock endowment."""
    if n_agents < 1:
        raise ParameterError(f"agent count must be >= 1, got {n_agents}")
    old_total = sum(count for count, _ in params.memory_groups)
    shares = [count * n_agents / old_total for count, _ in params.memory_groups]
    counts = [int(s) for s in shares]
    remainders = sorted(
        range(len(shares)), key=lambda i: (-(shares[i] - counts[i]), i)
    )
    short = n_agents - sum(counts)
    for i in remainders[:short]:
        counts[i] += 1
    groups = tuple(
        (c, m) for c, (_, m) in zip(counts, params.memory_groups)
    )
    return dataclasses.replace(
        params, N=n_agents, memory_groups=groups, n_total=None
    )


@dataclass
class AgentPool:
    """Column-wise state of all agents (one array entry per investor)."""

    w: np.ndarray            # wealth, > 0
    gamma: np.ndarray        # invested fraction, in [0.01, 0.99]
    gamma_star: np.ndarray   # pre-noise optimal fraction
    n_held: np.ndarray       # stocks held
    memory: np.ndarray       # memory span per agent (int64)
    group_id: np.ndarray     # memory-group index per agent (int64)

    @property
    def n(self) -> int:
        return self.w.shape[0]


class MarketState:
    """Price, dividend, step index, and the rolling return history.

    The history holds all total returns seen so far (artificial entries
    first, oldest to newest); it never shrinks, so any window up to the
    largest memory span is always available.
    """

    def __init__(self, S: float, D: float, history: np.ndarray, t: int = 0):
        if S <= 0:
            raise ParameterError(f"price must be > 0, got {S}")
        history = np.asarray(history, dtype=np.float64)
        if np.any(history <= -1.0):
            raise ParameterError("history entries must be > -1")
        self.S = float(S)
        self.D = float(D)
        self.t = int(t)
        cap = max(2 * history.size, 1024)
        self._buf = np.empty(cap, dtype=np.float64)
        self._buf[: history.size] = history
        self._len = history.size

    @property
    def history(self) -> np.ndarray:
        """All stored returns, oldest first (read-only view)."""
        view = self._buf[: self._len]
        view.flags.writeable = False
        return view

    def recent(self, m: int) -> np.ndarray:
        """The m most recent returns, oldest first (view, valid until push)."""
        if m > self._len:
            raise ParameterError(
                f"window of {m} requested but only {self._len} returns stored"
            )
        return self._buf[self._len - m : self._len]

    def push(self, x: float) -> None:
        if x <= -1.0:
            raise ParameterError(f"total return must be > -1, got {x}")
        if self._len == self._buf.size:
            grown = np.empty(2 * self._buf.size, dtype=np.float64)
            grown[: self._len] = self._buf[: self._len]
            self._buf = grown
        self._buf[self._len] = x
        self._len += 1


def dividend_step(d_prev: float, z: float) -> float:
    """One multiplicative dividend update: (1 + z) * d_prev."""
    if d_prev < 0:
        raise ParameterError(f"dividend must be >= 0, got {d_prev}")
    if z <= -1.0:
        raise ParameterError(f"dividend growth must be > -1, got {z}")
    return (1.0 + z) * d_prev


def stock_return(s_prev, s_cur, d_cur):
    """Total one-step stock return (s_cur - s_prev + d_cur) / s_prev."""
    bad = s_prev <= 0
    if bad if isinstance(bad, (bool, np.bool_)) else bool(np.any(bad)):
        raise ParameterError("previous price must be > 0")
    return (s_cur - s_prev + d_cur) / s_prev


def wealth_step(w, gamma, r, x):
    """Wealth after one step: w * (1 + (1 - gamma) * r + gamma * x).

    Accepts scalars or aligned arrays.  The multiplier is positive
    whenever x > -1 and r > 0, so wealth stays positive.
    """
    return w * (1.0 + (1.0 - gamma) * r + gamma * x)


def cutoff_H(x):
    """Clamp to the admissible investment-fraction range [0.01, 0.99]."""
    return np.clip(x, GAMMA_MIN, GAMMA_MAX)


def apply_gamma_noise(gamma_star: float, stream: RngStream, sigma_gamma: float) -> float:
    """Blur one optimal fraction with Gaussian noise and clamp it."""
    eps = stream.next_gaussian(0.0, sigma_gamma)
    return float(cutoff_H(gamma_star + eps))


@njit(cache=True)
def _mean_marginal(gamma, x, r, c):
    # mean of (x_j - r) / ((x_j - r) * gamma + c) over the window, c = 1 + r
    acc = 0.0
    for j in range(x.shape[0]):
        a = x[j] - r
        acc += a / (a * gamma + c)
    return acc / x.shape[0]


@njit(cache=True)
def _solve_gamma(x, r, gmin, gmax, tol):
    # Returns -1.0 when a denominator is non-positive somewhere in the
    # gamma range (pathological window); denominators are linear in
    # gamma, so checking both ends covers the interval.
    c = 1.0 + r
    for j in range(x.shape[0]):
        a = x[j] - r
        if a * gmin + c <= 0.0 or a * gmax + c <= 0.0:
            return -1.0
    # Boundary checks first: the derivative is strictly decreasing, so a
    # non-positive value at gmin pins the optimum there, likewise gmax.
    if _mean_marginal(gmin, x, r, c) <= 0.0:
        return gmin
    if _mean_marginal(gmax, x, r, c) >= 0.0:
        return gmax
    lo = gmin
    hi = gmax
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _mean_marginal(mid, x, r, c) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


_DOMAIN_MESSAGE = (
    "utility derivative undefined: a window return implies total loss "
    "(denominator <= 0 inside the gamma range)"
)


def utility_derivative(gamma: float, returns, r: float) -> float:
    """Marginal expected log utility of the invested fraction.

    f(gamma) = mean_j (x_j - r) / ((x_j - r) * gamma + 1 + r); strictly
    decreasing in gamma unless every x_j equals r.
    """
    a = np.ascontiguousarray(returns, dtype=np.float64) - r
    if a.size == 0:
        raise ParameterError("returns window must be non-empty")
    c = 1.0 + r
    lo = min(gamma, GAMMA_MIN)
    hi = max(gamma, GAMMA_MAX)
    if np.any(a * lo + c <= 0.0) or np.any(a * hi + c <= 0.0):
        raise DomainError(_DOMAIN_MESSAGE)
    return float(np.mean(a / (a * gamma + c)))


def _optimal_gamma_window(window: np.ndarray, r: float, gmin: float, gmax: float) -> float:
    """Hot-path solver over a contiguous float64 window (no copies)."""
    value = _solve_gamma(window, r, gmin, gmax, GAMMA_TOL)
    if value < 0.0:
        raise DomainError(_DOMAIN_MESSAGE)
    return value


def optimal_gamma(
    returns,
    r: float,
    gamma_min: float = GAMMA_MIN,
    gamma_max: float = GAMMA_MAX,
) -> float:
    """Investment fraction maximizing expected log utility on the window.

    Boundary cases resolve in two derivative evaluations; interior roots
    are bracketed by monotonicity and bisected to absolute tolerance
    1e-10.  When every window return equals r the utility is flat and
    the lower bound is returned.
    """
    if not 0.0 <= gamma_min <= gamma_max:
        raise ParameterError(
            f"gamma bounds must satisfy 0 <= gamma_min <= gamma_max, "
            f"got ({gamma_min}, {gamma_max})"
        )
    window = np.ascontiguousarray(returns, dtype=np.float64)
    if window.size == 0:
        raise ParameterError("returns window must be non-empty")
    return float(_optimal_gamma_window(window, r, gamma_min, gamma_max))


def init_state(params: ModelParams, stream: RngStream) -> tuple[AgentPool, MarketState]:
    """Build the initial agent pool and market.

    Every agent starts at (w0, gamma0, n0_per_agent); the return history
    is seeded with max-memory artificial entries drawn i.i.d. Gaussian
    (mu_h, sigma_h), oldest first.
    """
    params.validate()
    n = params.N
    memory = np.empty(n, dtype=np.int64)
    group_id = np.empty(n, dtype=np.int64)
    for gid, (start, stop, m) in enumerate(params.group_ranges()):
        memory[start:stop] = m
        group_id[start:stop] = gid
    pool = AgentPool(
        w=np.full(n, params.w0, dtype=np.float64),
        gamma=np.full(n, params.gamma0, dtype=np.float64),
        gamma_star=np.full(n, params.gamma0, dtype=np.float64),
        n_held=np.full(n, params.n0_per_agent, dtype=np.float64),
        memory=memory,
        group_id=group_id,
    )
    history = stream.gaussian_array(params.max_memory, params.mu_h, params.sigma_h)
    if np.any(history <= -1.0):
        raise NumericError("artificial history produced a return <= -1", step=0)
    market = MarketState(S=params.S0, D=params.D0, history=history, t=0)
    return pool, market
