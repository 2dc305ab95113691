"""Local statistics T_I for each distributional setting, with upper tail
bounds for use in the Bonferroni scan.

Every statistic follows the same two-step pattern: ``prepare`` turns a data
series into a :class:`Prepared` bundle (transformed values, prefix sums and
dataset-level constants), and ``from_sums`` maps interval sums and lengths
to statistic values. All statistics except the self-normalised one are
non-decreasing in the interval sum for a fixed length, which is what lets
the simulation code maximise window sums first and transform afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special, stats

from . import numerics
from ._kernels import self_normalized_many, self_normalized_tilde

E = math.e


@dataclass(frozen=True)
class Prepared:
    values: np.ndarray
    prefix: numerics.PrefixTable
    n: int
    total: float
    scale: float = 1.0
    extra: dict = field(default_factory=dict)


def _lengths_below_n(lengths, n):
    lengths = np.asarray(lengths)
    if np.any(lengths >= n):
        raise ValueError("statistic needs |I| < n")
    return lengths


class LocalStat:
    """Base class. Subclasses override ``from_sums`` and ``tail_prob``."""

    name = "abstract"
    monotone_in_sum = True
    simulable = True
    has_tail_bound = True
    tail_depends_on_length = False
    # raising data on a set never raises T_I for intervals I disjoint from it
    signal_monotone = False

    def prepare(self, data) -> Prepared:
        y = np.asarray(data, dtype=float)
        if y.ndim != 1 or y.size < 2:
            raise ValueError("data must be a 1-d series of length >= 2")
        if not np.all(np.isfinite(y)):
            raise ValueError("data contain NaN or inf")
        pre = numerics.build_prefix(y)
        return Prepared(values=y, prefix=pre, n=y.size, total=pre.total)

    def from_sums(self, sums, lengths, prep: Prepared):
        raise NotImplementedError

    def evaluate(self, prep: Prepared, j, k):
        j = np.asarray(j, dtype=np.int64)
        k = np.asarray(k, dtype=np.int64)
        return self.from_sums(prep.prefix.interval_sum(j, k), k - j, prep)

    def stat(self, data, interval) -> float:
        j, k = tuple(interval)
        return float(self.evaluate(self.prepare(data), j, k))

    def tail_prob(self, t, length=None, n=None):
        raise NotImplementedError

    def threshold_for_level(self, level: float, length: int | None = None, n: int | None = None) -> float:
        """Smallest t with tail_prob(t) <= level, by bracketing and bisection."""
        if not level > 0.0:
            raise ValueError("Bonferroni level underflowed to zero")
        if level >= 1.0:
            return 0.0
        g = lambda t: self.tail_prob(t, length, n) - level  # noqa: E731
        hi = 1.0
        while g(hi) > 0.0:
            hi *= 2.0
            if hi > 1e6:
                raise ValueError(f"tail bound never drops below level {level}")
        if g(1e-12) <= 0.0:
            return 0.0
        return optimize.brentq(g, 1e-12, hi, xtol=1e-13, rtol=1e-14)

    def describe(self) -> dict:
        return {"stat": self.name}


class GaussKnown(LocalStat):
    """Standardised interval sum, baseline 0 and noise level sigma known."""

    name = "gauss_known"
    signal_monotone = True

    def __init__(self, sigma: float = 1.0):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)

    def from_sums(self, sums, lengths, prep):
        return np.asarray(sums) / (self.sigma * np.sqrt(lengths))

    def tail_prob(self, t, length=None, n=None):
        return numerics.normal_sf(t)

    def threshold_for_level(self, level, length=None, n=None):
        if not level > 0.0:
            raise ValueError("Bonferroni level underflowed to zero")
        return numerics.normal_isf(level)

    def describe(self):
        return {"stat": self.name, "sigma": self.sigma}


class GaussBaseline(GaussKnown):
    """Mean difference to the overall mean with sigma known, baseline unknown."""

    name = "gauss_baseline"

    def from_sums(self, sums, lengths, prep):
        n = prep.n
        L = _lengths_below_n(lengths, n)
        diff = np.asarray(sums) / L - prep.total / n
        return diff / self.sigma * np.sqrt(n * L / (n - L))


class GaussStudentized(GaussKnown):
    """Baseline and sigma unknown: the previous statistic studentised by the
    sample standard deviation of the whole series."""

    name = "gauss_studentized"
    signal_monotone = False

    def __init__(self):
        self.sigma = 1.0

    def prepare(self, data):
        base = super().prepare(data)
        sd = float(np.std(base.values, ddof=1))
        if not sd > 0.0:
            raise ValueError("zero sample variance")
        return Prepared(base.values, base.prefix, base.n, base.total, scale=sd)

    def from_sums(self, sums, lengths, prep):
        n = prep.n
        L = _lengths_below_n(lengths, n)
        diff = np.asarray(sums) / L - prep.total / n
        return diff / prep.scale * np.sqrt(n * L / (n - L))

    def tail_prob(self, t, length=None, n=None):
        # the normal bound is only established for t >= 2.5 (n >= 10) or t >= 2.75 (n >= 6)
        t = np.asarray(t, dtype=float)
        if n is None:
            ok = t >= 2.75
        elif n >= 10:
            ok = t >= 2.5
        elif n >= 6:
            ok = t >= 2.75
        else:
            ok = np.zeros_like(t, dtype=bool)
        out = np.where(ok, numerics.normal_sf(t), 1.0)
        return float(out) if out.ndim == 0 else out

    def threshold_for_level(self, level, length=None, n=None):
        if not level > 0.0:
            raise ValueError("Bonferroni level underflowed to zero")
        t = numerics.normal_isf(min(level, 0.5))
        floor = 2.5 if (n is not None and n >= 10) else 2.75
        if n is not None and n < 6:
            raise ValueError("no tail bound for the studentised statistic when n < 6")
        return max(t, floor)

    def describe(self):
        return {"stat": self.name}


# ---------------------------------------------------------------------------
# natural exponential families


class ExpFamily:
    """One-parameter natural exponential family, in mean parametrisation.

    ``divergence(a, b)`` is the Bregman divergence of the conjugate of the
    cumulant function: A*(a) - A*(b) - (A*)'(b) (a - b). Summed with weights
    |I| and n - |I| it equals the generalised log likelihood ratio, because
    the linear terms cancel.
    """

    name = "abstract"

    def check_domain(self, xbar):
        pass

    def divergence(self, a, b):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"family": self.name}


class Bernoulli(ExpFamily):
    name = "bernoulli"

    def check_domain(self, xbar):
        xbar = np.asarray(xbar)
        if np.any(xbar < -1e-12) or np.any(xbar > 1 + 1e-12):
            raise ValueError("Bernoulli means must lie in [0, 1]")

    def divergence(self, a, b):
        a = np.clip(a, 0.0, 1.0)
        b = np.clip(b, 0.0, 1.0)
        return special.rel_entr(a, b) + special.rel_entr(1.0 - a, 1.0 - b)

    def A(self, theta):
        return np.logaddexp(0.0, theta)

    def mean_of(self, theta):
        return special.expit(theta)

    def theta_of(self, mean):
        return special.logit(mean)


class Poisson(ExpFamily):
    name = "poisson"

    def check_domain(self, xbar):
        if np.any(np.asarray(xbar) < -1e-12):
            raise ValueError("Poisson means must be >= 0")

    def divergence(self, a, b):
        a = np.maximum(a, 0.0)
        b = np.maximum(b, 0.0)
        return special.rel_entr(a, b) - a + b

    def A(self, theta):
        return np.exp(theta)

    def mean_of(self, theta):
        return np.exp(theta)

    def theta_of(self, mean):
        return np.log(mean)


class CustomFamily(ExpFamily):
    """Family given by its cumulant A, the mean map A' and its inverse."""

    def __init__(self, A: Callable, dA: Callable, dA_inv: Callable, name: str = "custom"):
        self._A = A
        self._dA = dA
        self._inv = dA_inv
        self.name = name

    def A(self, theta):
        return self._A(theta)

    def mean_of(self, theta):
        return self._dA(theta)

    def theta_of(self, mean):
        return self._inv(mean)

    def _conj(self, x):
        th = self._inv(x)
        return th * x - self._A(th)

    def divergence(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        tb = self._inv(b)
        return self._conj(a) - self._conj(b) - tb * (a - b)


def gaussian_family(sigma: float = 1.0) -> CustomFamily:
    s2 = sigma * sigma
    return CustomFamily(
        A=lambda th: 0.5 * s2 * np.asarray(th) ** 2,
        dA=lambda th: s2 * np.asarray(th),
        dA_inv=lambda x: np.asarray(x) / s2,
        name=f"gaussian(sigma={sigma:g})",
    )


FAMILIES = {"bernoulli": Bernoulli, "poisson": Poisson}


def expfam_tail_bound(t):
    """(2 + e) exp(-t^2/2), capped at 1, for the one-sided signed root."""
    t = np.asarray(t, dtype=float)
    out = np.minimum(1.0, (2.0 + E) * np.exp(-0.5 * t * t))
    return float(out) if out.ndim == 0 else out


class SignedRootLR(LocalStat):
    """sign(mean_I - mean) * sqrt(2 logLR) for a change in mean on I, with the
    baseline estimated from the whole series."""

    name = "expfam"
    signal_monotone = True

    def __init__(self, family: ExpFamily | str, analytic_tail: bool = False):
        if isinstance(family, str):
            family = FAMILIES[family]()
        self.family = family
        self.analytic_tail = analytic_tail

    def prepare(self, data):
        prep = super().prepare(data)
        self.family.check_domain(prep.values)
        return prep

    def from_sums(self, sums, lengths, prep):
        n = prep.n
        L = _lengths_below_n(lengths, n)
        sums = np.asarray(sums, dtype=float)
        mean = prep.total / n
        mean_in = sums / L
        mean_out = (prep.total - sums) / (n - L)
        llr = L * self.family.divergence(mean_in, mean) + (n - L) * self.family.divergence(mean_out, mean)
        root = np.sqrt(2.0 * np.maximum(llr, 0.0))
        return np.where(mean_in > mean, root, np.where(mean_in < mean, -root, 0.0))

    def log_lr(self, data, interval) -> float:
        prep = self.prepare(data)
        j, k = tuple(interval)
        return float(self.from_sums(prep.prefix.interval_sum(j, k), k - j, prep)) ** 2 / 2.0

    def tail_prob(self, t, length=None, n=None):
        if self.analytic_tail:
            return expfam_tail_bound(t)
        return numerics.normal_sf(t)

    def threshold_for_level(self, level, length=None, n=None):
        if not level > 0.0:
            raise ValueError("Bonferroni level underflowed to zero")
        if self.analytic_tail:
            if level >= 1.0:
                return 0.0
            return math.sqrt(2.0 * math.log((2.0 + E) / level)) if level < 2.0 + E else 0.0
        return numerics.normal_isf(level)

    def describe(self):
        return {"stat": self.name, "family": self.family.name, "analytic_tail": self.analytic_tail}


class KnownBaselineLR(LocalStat):
    """Signed root of the log likelihood ratio against a known null parameter theta0."""

    name = "expfam_known"
    signal_monotone = True

    def __init__(self, family: ExpFamily, theta0: float):
        self.family = family
        self.theta0 = float(theta0)

    def from_sums(self, sums, lengths, prep):
        L = np.asarray(lengths, dtype=float)
        mean_in = np.asarray(sums, dtype=float) / L
        mu0 = float(self.family.mean_of(self.theta0))
        llr = L * self.family.divergence(mean_in, mu0)
        root = np.sqrt(2.0 * np.maximum(llr, 0.0))
        return np.where(mean_in > mu0, root, np.where(mean_in < mu0, -root, 0.0))

    def tail_prob(self, t, length=None, n=None):
        t = np.asarray(t, dtype=float)
        out = np.minimum(1.0, np.exp(-0.5 * t * t))
        return float(out) if out.ndim == 0 else out

    def describe(self):
        return {"stat": self.name, "family": self.family.name, "theta0": self.theta0}


# ---------------------------------------------------------------------------
# self-normalisation


def selfnorm_g(t):
    t = np.asarray(t, dtype=float)
    # phi/(1 - Phi) in log space so the ratio stays finite far in the tail
    mills = np.exp(-0.5 * t * t - 0.5 * math.log(2.0 * math.pi) - special.log_ndtr(-t))
    return 1.0 + 14.11 * mills / (9.0 + t * t)


def selfnorm_tail_bound(t):
    """min(3.18, g(t)) * P(N(0,1) > t), capped at 1."""
    t = np.asarray(t, dtype=float)
    out = np.minimum(1.0, np.minimum(3.18, selfnorm_g(t)) * numerics.normal_sf(t))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SelfNormContext:
    """Partition of the retained complement of I into the sets J_i."""

    n_used: int
    p: int
    interval: tuple[int, int]
    parts: tuple[tuple[int, ...], ...]


def selfnorm_context(n: int, interval) -> SelfNormContext:
    j, k = tuple(interval)
    L = k - j
    p = n // L
    if p < 2:
        raise ValueError("self-normalisation needs n >= 2|I|")
    comp = [t for t in range(n) if not j <= t < k][: L * (p - 1)]
    parts = tuple(tuple(comp[r::L]) for r in range(L))
    return SelfNormContext(n_used=L * p, p=p, interval=(j, k), parts=parts)


class SelfNormalized(LocalStat):
    """Sum of differenced values over I divided by the root of their squares.

    Each Y_i, i in I, has the mean of its own block J_i of p - 1 complement
    values subtracted, which removes an unknown common centre of symmetry.
    The bound on the tail needs the variances to change slowly along the
    series; this is not checked.
    """

    name = "self_normalized"
    monotone_in_sum = False
    simulable = False

    def evaluate(self, prep, j, k):
        j = np.atleast_1d(np.asarray(j, dtype=np.int64))
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        if np.any(2 * (k - j) > prep.n):
            raise ValueError("self-normalisation needs n >= 2|I|")
        out = self_normalized_many(prep.values, j, k)
        if np.any(np.isnan(out)):
            raise ValueError("self-normalised denominator is zero")
        return out

    def stat(self, data, interval):
        return float(self.evaluate(self.prepare(data), *tuple(interval))[0])

    def tilde(self, data, interval) -> np.ndarray:
        j, k = tuple(interval)
        return self_normalized_tilde(np.asarray(data, dtype=float), j, k)

    def from_sums(self, sums, lengths, prep):
        raise TypeError("the self-normalised statistic is not a function of interval sums")

    def tail_prob(self, t, length=None, n=None):
        return selfnorm_tail_bound(t)


def selfnorm_matrix_form(data, interval) -> float:
    """(n/(n-|I|)) sum_I (Y_i - mean) / sqrt(Y' A' A Y), with A built explicitly."""
    y_all = np.asarray(data, dtype=float)
    ctx = selfnorm_context(y_all.size, interval)
    j, k = ctx.interval
    keep = sorted(set(range(j, k)) | {t for part in ctx.parts for t in part})
    pos = {t: i for i, t in enumerate(keep)}
    y = y_all[keep]
    n = y.size
    A = np.zeros((k - j, n))
    for r, part in enumerate(ctx.parts):
        A[r, pos[j + r]] = 1.0
        for t in part:
            A[r, pos[t]] = -1.0 / len(part)
    num = np.sum(y_all[j:k] - y.mean())
    return n / (n - (k - j)) * num / math.sqrt(y @ A.T @ A @ y)


# ---------------------------------------------------------------------------
# rank and sign statistics


class WilcoxonRank(LocalStat):
    """Standardised rank sum over I (mid-ranks for ties)."""

    name = "wilcoxon"
    signal_monotone = True
    tail_depends_on_length = True

    def __init__(self, normal_tail: bool = False):
        self.normal_tail = normal_tail

    def prepare(self, data):
        base = super().prepare(data)
        ranks = stats.rankdata(base.values)
        pre = numerics.build_prefix(ranks)
        return Prepared(values=ranks, prefix=pre, n=base.n, total=pre.total)

    def from_sums(self, sums, lengths, prep):
        n = prep.n
        L = _lengths_below_n(lengths, n)
        return np.sqrt(12.0 * L / ((n + 1.0) * (n - L))) * (np.asarray(sums) / L - (n + 1.0) / 2.0)

    def tail_prob(self, t, length=None, n=None):
        if self.normal_tail:
            return numerics.normal_sf(t)
        return wilcoxon_tail_bound(t, length, n)

    def threshold_for_level(self, level, length=None, n=None):
        if not level > 0.0:
            raise ValueError("Bonferroni level underflowed to zero")
        if self.normal_tail:
            return numerics.normal_isf(level)
        if level >= 1.0:
            return 0.0
        return math.sqrt(2.0 * math.log(1.0 / level) * (n + 1.0) / (n - length))

    def describe(self):
        return {"stat": self.name, "normal_tail": self.normal_tail}


def wilcoxon_tail_bound(t, length, n):
    t = np.asarray(t, dtype=float)
    u = np.sqrt((n - np.asarray(length)) / (n + 1.0)) * t
    out = np.where(t > 0, np.minimum(1.0, np.exp(-0.5 * u * u)), 1.0)
    return float(out) if out.ndim == 0 else out


def median_indicators(data) -> np.ndarray:
    y = np.asarray(data, dtype=float)
    return (y >= np.median(y)).astype(float)


class SignTest(LocalStat):
    """Bernoulli signed root applied to the indicators 1(Y_i >= median)."""

    name = "sign"
    tail_depends_on_length = True

    def __init__(self):
        self._lr = SignedRootLR(Bernoulli())

    def prepare(self, data):
        base = super().prepare(data)
        ind = median_indicators(base.values)
        pre = numerics.build_prefix(ind)
        return Prepared(values=ind, prefix=pre, n=base.n, total=pre.total, extra={"K": int(ind.sum())})

    def from_sums(self, sums, lengths, prep):
        return self._lr.from_sums(sums, lengths, prep)

    @staticmethod
    def default_ones(n: int) -> int:
        return n - n // 2

    def count_stats(self, length: int, n: int, K: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Statistic value and null probability for every feasible count in I."""
        K = self.default_ones(n) if K is None else K
        lo, hi = max(0, length - (n - K)), min(K, length)
        counts = np.arange(lo, hi + 1)
        prep = Prepared(values=np.empty(0), prefix=numerics.build_prefix([0.0]), n=n, total=float(K))
        tvals = self._lr.from_sums(counts.astype(float), np.full(counts.shape, length), prep)
        probs = np.array([numerics.hypergeometric_pmf(int(c), n, K, length) for c in counts])
        return tvals, probs

    def tail_prob(self, t, length=None, n=None, K=None):
        tvals, probs = self.count_stats(length, n, K)
        t = np.asarray(t, dtype=float)
        out = np.array([min(1.0, math.fsum(probs[tvals >= tt - 1e-12])) for tt in np.atleast_1d(t)])
        return float(out[0]) if t.ndim == 0 else out

    def threshold_for_level(self, level, length=None, n=None, K=None):
        """Largest value strictly below the smallest attainable statistic whose
        exact upper tail is within ``level``; rejection is ``T > threshold``."""
        if not level > 0.0:
            raise ValueError("Bonferroni level underflowed to zero")
        tvals, probs = self.count_stats(length, n, K)
        order = np.argsort(tvals)
        tv, pr = tvals[order], probs[order]
        tails = np.cumsum(pr[::-1])[::-1]
        ok = np.nonzero(tails <= level)[0]
        if ok.size == 0:
            return math.inf
        return float(np.nextafter(tv[ok[0]], -np.inf))


def sign_tail_prob(t, length, n, K=None):
    return SignTest().tail_prob(t, length, n, K)


# convenience wrappers mirroring single-interval use


def t_gauss_known(prefix: numerics.PrefixTable, interval) -> float:
    j, k = tuple(interval)
    return float(prefix.interval_sum(j, k) / math.sqrt(k - j))


def t_gauss_baseline(prefix: numerics.PrefixTable, interval, n: int, sigma: float) -> float:
    j, k = tuple(interval)
    prep = Prepared(values=np.empty(0), prefix=prefix, n=n, total=prefix.total)
    return float(GaussBaseline(sigma).from_sums(prefix.interval_sum(j, k), k - j, prep))


def t_gauss_studentized(data, interval) -> float:
    return GaussStudentized().stat(data, interval)


def signed_root_loglr_expfam(data, interval, family) -> float:
    return SignedRootLR(family).stat(data, interval)


def t_self_normalized(data, interval) -> float:
    return SelfNormalized().stat(data, interval)


def t_wilcoxon(data, interval) -> float:
    return WilcoxonRank().stat(data, interval)


def t_sign(data, interval) -> float:
    return SignTest().stat(data, interval)


STATS = {
    "gauss_known": GaussKnown,
    "gauss_baseline": GaussBaseline,
    "gauss_studentized": GaussStudentized,
    "bernoulli": lambda: SignedRootLR(Bernoulli()),
    "poisson": lambda: SignedRootLR(Poisson()),
    "self_normalized": SelfNormalized,
    "wilcoxon": WilcoxonRank,
    "sign": SignTest,
}


def make_stat(name: str, **kw) -> LocalStat:
    try:
        factory = STATS[name]
    except KeyError:
        raise ValueError(f"unknown statistic {name!r}; choose from {sorted(STATS)}") from None
    if name in ("bernoulli", "poisson"):
        return SignedRootLR(FAMILIES[name](), analytic_tail=kw.get("analytic_tail", False))
    if name in ("gauss_known", "gauss_baseline"):
        return factory(kw.get("sigma", 1.0))
    return factory()


def stat_key(stat: LocalStat) -> str:
    d = stat.describe()
    if d.get("family") in ("bernoulli", "poisson") and d["stat"] == "expfam":
        return d["family"]
    return d["stat"]
