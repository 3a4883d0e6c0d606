"""Seedable pseudo-random number generation with bit-exact replay.

Two generator cores sit behind one stream interface:

* ``mersenne`` -- the 64-bit Mersenne Twister (MT19937-64), the
  high-quality default,
* ``randu`` -- the infamous RANDU linear congruential generator
  (multiplier 65539, modulus 2**31), kept deliberately defective so that
  generator-quality artifacts can be studied.  All RANDU arithmetic is
  done modulo 2**31 regardless of the host word size, so the classic
  lattice defect is never masked.

A stream is single-owner mutable state: never draw from one stream
concurrently.  Distinct streams are fully independent and may be used in
parallel.  Given (algorithm, seed), the output sequence is a pure
function of the sequence of draw calls; the hot loops are compiled with
numba but use only fixed-width integer and float64 arithmetic, so
sequences are identical across hosts.

Gaussian deviates use the Marsaglia polar method.  Both values of each
accepted antithetic pair are consumed in order (the second is returned
by the next draw without touching the underlying integer stream), which
makes the raw-draw count per Gaussian deterministic given the uniform
sequence.
"""

from __future__ import annotations

import enum
import math
import os
import time

import numpy as np
from numba import njit

from .errors import ConfigError, ParameterError

_U64 = np.uint64
_MASK64 = (1 << 64) - 1

# MT19937-64 constants (standard algorithm parameters).
_MT_N = 312
_MT_M = 156
_MT_MATRIX_A = _U64(0xB5026F5AA96619E9)
_MT_UPPER = _U64(0xFFFFFFFF80000000)
_MT_LOWER = _U64(0x7FFFFFFF)
_MT_INIT_MULT = _U64(6364136223846793005)
_T1 = _U64(0x5555555555555555)
_T2 = _U64(0x71D67FFFEDA60000)
_T3 = _U64(0xFFF7EEE000000000)
_S62 = _U64(62)
_S29 = _U64(29)
_S17 = _U64(17)
_S37 = _U64(37)
_S43 = _U64(43)
_S11 = _U64(11)
_S1 = _U64(1)
_ONE = _U64(1)

# RANDU: x_{k+1} = 65539 * x_k mod 2**31, state always odd.
RANDU_MULTIPLIER = 65539
RANDU_MODULUS = 1 << 31
_RANDU_MULT = _U64(RANDU_MULTIPLIER)
_RANDU_MASK = _U64(RANDU_MODULUS - 1)

# Top 53 bits of the 64-bit output map to [0, 1) without ever rounding
# up to 1.0; RANDU's 31-bit state divides exactly in float64.
_INV53 = 1.0 / float(1 << 53)
_INV31 = 1.0 / float(1 << 31)

_ALG_MERSENNE = 0
_ALG_RANDU = 1


class RngAlgorithm(enum.Enum):
    """The two supported generator cores."""

    MERSENNE_HQ = "mersenne"
    RANDU = "randu"

    @classmethod
    def from_name(cls, name: str) -> "RngAlgorithm":
        for alg in cls:
            if alg.value == name:
                return alg
        known = ", ".join(a.value for a in cls)
        raise ConfigError(
            f"unknown rng algorithm {name!r} (expected one of: {known})",
            field="rng.algorithm",
        )


def splitmix64(x: int) -> int:
    """One SplitMix64 scramble step of a 64-bit value."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_replica_seed(seed: int, index: int) -> int:
    """Seed for independent replica ``index``: splitmix64(seed + index)."""
    if index < 0:
        raise ParameterError(f"replica index must be >= 0, got {index}")
    return splitmix64((seed + index) & _MASK64)


def auto_seed() -> int:
    """Fresh 64-bit seed from OS entropy, falling back to the clock."""
    try:
        return int.from_bytes(os.urandom(8), "little")
    except NotImplementedError:  # pragma: no cover
        return time.time_ns() & _MASK64


def randu_next(state: int) -> tuple[int, int]:
    """Advance a RANDU state once; returns (new_state, value).

    The value equals the new state.  Oddness is preserved because both
    the multiplier and any odd state are odd and the modulus is a power
    of two.
    """
    if not (1 <= state < RANDU_MODULUS) or state % 2 == 0:
        raise ParameterError(
            f"RANDU state must be odd and in [1, 2**31 - 1], got {state}"
        )
    new = (RANDU_MULTIPLIER * state) % RANDU_MODULUS
    return new, new


@njit(cache=True)
def _mt_init(mt, seed):
    prev = seed
    mt[0] = prev
    for i in range(1, 312):
        prev = _MT_INIT_MULT * (prev ^ (prev >> _S62)) + _U64(i)
        mt[i] = prev


@njit(cache=True)
def _mt_twist(mt):
    # In-place twist; the mixed reads of old/new entries match the
    # reference sequential formulation.
    for i in range(312):
        x = (mt[i] & _MT_UPPER) | (mt[(i + 1) % 312] & _MT_LOWER)
        y = mt[(i + 156) % 312] ^ (x >> _S1)
        if x & _ONE:
            y ^= _MT_MATRIX_A
        mt[i] = y


@njit(cache=True)
def _mt_temper(y):
    y ^= (y >> _S29) & _T1
    y ^= (y << _S17) & _T2
    y ^= (y << _S37) & _T3
    y ^= y >> _S43
    return y


@njit(cache=True)
def _next_raw(alg, mt, idx, lcg, count):
    count[0] += 1
    if alg == 0:
        i = idx[0]
        if i >= 312:
            _mt_twist(mt)
            i = 0
        idx[0] = i + 1
        return _mt_temper(mt[i])
    s = (_RANDU_MULT * lcg[0]) & _RANDU_MASK
    lcg[0] = s
    return s


@njit(cache=True)
def _next_u01(alg, mt, idx, lcg, count):
    r = _next_raw(alg, mt, idx, lcg, count)
    if alg == 0:
        return (r >> _S11) * _INV53
    return r * _INV31


@njit(cache=True)
def _next_gaussian_std(alg, mt, idx, lcg, count, spare):
    if spare[0] != 0.0:
        spare[0] = 0.0
        return spare[1]
    u = 0.0
    v = 0.0
    s = 0.0
    while True:
        u = 2.0 * _next_u01(alg, mt, idx, lcg, count) - 1.0
        v = 2.0 * _next_u01(alg, mt, idx, lcg, count) - 1.0
        s = u * u + v * v
        if 0.0 < s < 1.0:
            break
    scale = math.sqrt(-2.0 * math.log(s) / s)
    spare[0] = 1.0
    spare[1] = v * scale
    return u * scale


@njit(cache=True)
def _fill_raw(alg, mt, idx, lcg, count, out):
    for k in range(out.shape[0]):
        out[k] = _next_raw(alg, mt, idx, lcg, count)


@njit(cache=True)
def _fill_u01(alg, mt, idx, lcg, count, out):
    for k in range(out.shape[0]):
        out[k] = _next_u01(alg, mt, idx, lcg, count)


@njit(cache=True)
def _fill_gaussian_std(alg, mt, idx, lcg, count, spare, out):
    for k in range(out.shape[0]):
        out[k] = _next_gaussian_std(alg, mt, idx, lcg, count, spare)


class RngStream:
    """A seeded deterministic generator with uniform and Gaussian draws.

    For ``randu`` the effective initial state is ``(seed mod 2**31)``
    with the lowest bit forced to 1, so seed 0 maps to state 1.
    """

    def __init__(self, algorithm: RngAlgorithm, seed: int):
        if not isinstance(algorithm, RngAlgorithm):
            raise ConfigError(
                f"algorithm must be an RngAlgorithm, got {algorithm!r}",
                field="rng.algorithm",
            )
        if seed < 0:
            raise ParameterError(f"seed must be non-negative, got {seed}")
        self.algorithm = algorithm
        self.seed = seed & _MASK64
        self._alg = _ALG_MERSENNE if algorithm is RngAlgorithm.MERSENNE_HQ else _ALG_RANDU
        self._mt = np.zeros(_MT_N, dtype=np.uint64)
        self._idx = np.array([_MT_N], dtype=np.int64)
        self._lcg = np.zeros(1, dtype=np.uint64)
        self._count = np.zeros(1, dtype=np.int64)
        self._spare = np.zeros(2, dtype=np.float64)
        if self._alg == _ALG_MERSENNE:
            _mt_init(self._mt, _U64(self.seed))
        else:
            self._lcg[0] = (self.seed % RANDU_MODULUS) | 1

    @property
    def draw_count(self) -> int:
        """Total raw integer outputs consumed so far."""
        return int(self._count[0])

    @property
    def state(self) -> int:
        """Current RANDU state (only meaningful for the randu core)."""
        return int(self._lcg[0])

    def next_raw(self) -> int:
        """Next raw output: 64-bit for mersenne, 31-bit for randu."""
        return int(_next_raw(self._alg, self._mt, self._idx, self._lcg, self._count))

    def next_uniform01(self) -> float:
        """Next deviate in [0, 1)."""
        return float(_next_u01(self._alg, self._mt, self._idx, self._lcg, self._count))

    def next_uniform(self, a: float, b: float) -> float:
        """Next deviate in [a, b]; one raw draw is consumed even if a == b."""
        if a > b:
            raise ParameterError(f"uniform bounds must satisfy a <= b, got ({a}, {b})")
        u = self.next_uniform01()
        if a == b:
            return a
        return a + (b - a) * u

    def next_gaussian(self, mu: float, sigma: float) -> float:
        """Next Gaussian deviate; sigma == 0 returns mu exactly but still
        advances the stream like any other Gaussian draw."""
        if sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {sigma}")
        z = _next_gaussian_std(
            self._alg, self._mt, self._idx, self._lcg, self._count, self._spare
        )
        return mu + sigma * float(z)

    def raw_array(self, n: int) -> np.ndarray:
        """n raw outputs, identical to n calls of next_raw()."""
        out = np.empty(int(n), dtype=np.uint64)
        _fill_raw(self._alg, self._mt, self._idx, self._lcg, self._count, out)
        return out

    def uniform01_array(self, n: int) -> np.ndarray:
        """n deviates in [0, 1), identical to n calls of next_uniform01()."""
        out = np.empty(int(n), dtype=np.float64)
        _fill_u01(self._alg, self._mt, self._idx, self._lcg, self._count, out)
        return out

    def gaussian_array(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        """n Gaussian deviates, identical to n calls of next_gaussian()."""
        if sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {sigma}")
        out = np.empty(int(n), dtype=np.float64)
        _fill_gaussian_std(
            self._alg, self._mt, self._idx, self._lcg, self._count, self._spare, out
        )
        if sigma != 1.0 or mu != 0.0:
            out *= sigma
            out += mu
        return out

    def __repr__(self) -> str:  # pragma: no cover
        return (
            f"RngStream(algorithm={self.algorithm.value!r}, seed={self.seed}, "
            f"draws={self.draw_count})"
        )


def seed_stream(algorithm: RngAlgorithm, seed: int) -> RngStream:
    """Create an initialized stream for (algorithm, seed)."""
    return RngStream(algorithm, seed)
