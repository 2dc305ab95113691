"""Special functions, order-statistic quantiles and prefix-sum tables."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

# above this length the prefix sums are accumulated with Neumaier compensation
COMPENSATED_MIN_N = 100_000


def normal_cdf(t):
    return special.ndtr(t)


def normal_sf(t):
    """Upper tail 1 - Phi(t), accurate far into the tail."""
    return special.ndtr(np.negative(t))


def normal_pdf(t):
    t = np.asarray(t, dtype=float)
    return np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def normal_quantile(p):
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)) or np.any(np.isnan(p_arr)):
        raise ValueError(f"normal_quantile needs p in (0, 1), got {p!r}")
    out = special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def normal_isf(q):
    """Inverse of the upper tail: returns t with 1 - Phi(t) = q.

    Preferred over ``normal_quantile(1 - q)`` for tiny q, where forming
    ``1 - q`` throws away most of the significant digits.
    """
    q_arr = np.asarray(q, dtype=float)
    if np.any((q_arr <= 0.0) | (q_arr >= 1.0)) or np.any(np.isnan(q_arr)):
        raise ValueError(f"normal_isf needs q in (0, 1), got {q!r}")
    out = -special.ndtri(q_arr)
    return float(out) if out.ndim == 0 else out


def _log_choose(a: int, b: int) -> float:
    return math.lgamma(a + 1) - math.lgamma(b + 1) - math.lgamma(a - b + 1)


def hypergeometric_pmf(x: int, n: int, K: int, m: int) -> float:
    """P(X = x) for X the number of marked items in m draws without
    replacement from n items of which K are marked."""
    if x < max(0, m - (n - K)) or x > min(K, m):
        return 0.0
    return math.exp(_log_choose(K, x) + _log_choose(n - K, m - x) - _log_choose(n, m))


def hypergeometric_upper_tail(x: int, n: int, K: int, m: int) -> float:
    """P(X >= x), summed term by term from log-gamma binomials."""
    if not (0 <= K <= n and 1 <= m <= n):
        raise ValueError(f"invalid hypergeometric parameters n={n}, K={K}, m={m}")
    lo = max(0, m - (n - K))
    hi = min(K, m)
    x = max(int(math.ceil(x)), lo)
    if x > hi:
        return 0.0
    if x == lo:
        return 1.0
    total = math.fsum(hypergeometric_pmf(i, n, K, m) for i in range(x, hi + 1))
    return min(1.0, total)


def empirical_quantile(samples, level: float) -> float:
    """Upper order-statistic quantile: the ceil(level * M)-th smallest sample."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empirical_quantile of an empty sample")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    rank = upper_rank(level, x.size)
    return float(np.partition(x, rank - 1)[rank - 1])


def upper_rank(level: float, m: int) -> int:
    # the tolerance keeps 0.8 * 10 from rounding up to rank 9
    rank = math.ceil(level * m - 1e-9)
    return min(max(rank, 1), m)


@dataclass(frozen=True)
class PrefixTable:
    """Cumulative sums ``S`` and squared sums ``Q``, both of length n + 1."""

    S: np.ndarray
    Q: np.ndarray

    @property
    def n(self) -> int:
        return self.S.shape[0] - 1

    def _check(self, j, k):
        j = np.asarray(j)
        k = np.asarray(k)
        if np.any(j < 0) or np.any(k > self.n) or np.any(j >= k):
            raise IndexError(f"interval out of range for n={self.n}")
        return j, k

    def interval_sum(self, j, k):
        j, k = self._check(j, k)
        return self.S[k] - self.S[j]

    def interval_sumsq(self, j, k):
        j, k = self._check(j, k)
        return self.Q[k] - self.Q[j]

    @property
    def total(self) -> float:
        return float(self.S[-1])


def cumsum0(x) -> np.ndarray:
    """Prefix sums with a leading zero."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] >= COMPENSATED_MIN_N:
        return _kernels_cumsum(x)
    out = np.empty(x.shape[0] + 1)
    out[0] = 0.0
    np.cumsum(x, out=out[1:])
    return out


def _kernels_cumsum(x):
    from ._kernels import compensated_cumsum

    return compensated_cumsum(x)


def build_prefix(data) -> PrefixTable:
    y = np.asarray(data, dtype=float)
    if y.ndim != 1 or y.shape[0] < 1:
        raise ValueError("build_prefix needs a non-empty 1-d array")
    return PrefixTable(S=cumsum0(y), Q=cumsum0(y * y))


def interval_sum(table: PrefixTable, interval) -> float:
    j, k = interval
    return float(table.interval_sum(j, k))


def interval_sumsq(table: PrefixTable, interval) -> float:
    j, k = interval
    return float(table.interval_sumsq(j, k))
