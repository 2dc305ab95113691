"""Power by the realized exponent: smallest detectable amplitude per
replicate by bisection, its 80th percentile over replicates, and the
exponent e_n solving sqrt(L) mu = sqrt(2 e_n log(e n / L))."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics
from .calibrations import CritTable, per_length_max
from .intervals import IntervalSource
from .local_stats import GaussKnown, LocalStat
from .null_models import Gaussian, NullModel, RngStream, Zero, random_signal_placement

log = logging.getLogger(__name__)

BRACKET_CAP = 2.0**30
REL_TOL = 1e-3
POWER = 0.8

LENGTHS_N1E4 = (1, 5, 10, 15, 50, 100, 500, 1000)
LENGTHS_N1E6 = (1, 10, 100, 1000, 10_000, 100_000)


class BracketError(RuntimeError):
    pass


class PowerStudyError(RuntimeError):
    def __init__(self, msg, partial):
        super().__init__(msg)
        self.partial = partial


@dataclass
class Bisection:
    mu: float
    lo: float
    hi: float
    evaluations: int
    monotone_ok: bool = True


def min_mu(rejects, rel_tol: float = REL_TOL, cap: float = BRACKET_CAP, spot_check: bool = True) -> Bisection:
    """Smallest amplitude at which ``rejects(mu)`` turns true, assuming monotonicity.

    The bracket is found by doubling from 1, then halved until its width is
    at most ``rel_tol`` times the upper end found by doubling.
    """
    calls = [0]

    def f(mu):
        calls[0] += 1
        return bool(rejects(mu))

    if f(0.0):
        return Bisection(0.0, 0.0, 0.0, calls[0])
    hi = 1.0
    while not f(hi):
        hi *= 2.0
        if hi > cap:
            raise BracketError(f"no rejection up to mu = {cap:g}")
    lo = hi / 2.0 if hi > 1.0 else 0.0
    tol = rel_tol * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid):
            hi = mid
        else:
            lo = mid
    ok = True
    if spot_check:
        ok = f(2.0 * hi) and (lo == 0.0 or not f(0.5 * lo))
    return Bisection(0.5 * (lo + hi), lo, hi, calls[0], ok)


def realized_exponent_value(n: int, length: int, mu_min: float) -> float:
    return length * mu_min**2 / (2.0 * math.log(math.e * n / length))


@dataclass
class PowerResult:
    n: int
    signal_length: int
    calibration: str
    model: str
    replicates: int
    mu_min: float
    e_n: float
    seed: int
    non_monotone: int = 0
    per_replicate: np.ndarray | None = field(default=None, repr=False)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("per_replicate")
        return d


def _thresholds_on(table: CritTable, lengths, stat, source) -> np.ndarray:
    return np.asarray(table.thresholds(lengths, stat, source), dtype=float)


class ReplicateProblem:
    """One null draw and planted interval, and the test decision as a function
    of the amplitude for every calibration at once."""

    def __init__(self, stat, model, source, grid_thr, len_index, null, interval, stream):
        self.stat = stat
        self.source = source
        self.interval = interval
        self.inject = model.injector(null, interval, stream)
        L, d = source.grid()
        self.L, self.d = L, d
        prep0 = stat.prepare(null)
        tmax0 = per_length_max(stat, prep0, L, d)
        self.null_reject = {c: bool(np.any(tmax0 > thr)) for c, thr in grid_thr.items()}
        self.grid_thr = grid_thr
        self.restricted = stat.signal_monotone
        self.linear = isinstance(stat, GaussKnown) and type(stat) is GaussKnown and isinstance(model, (Gaussian, Zero))
        self._cache = {}
        if self.restricted:
            a, b = interval
            jc, kc = source.intersecting(a, b)
            self.jc, self.kc = jc, kc
            pos = len_index[kc - jc]
            self.cand_thr = {c: thr[pos] for c, thr in grid_thr.items()}
            if self.linear:
                self.t0 = stat.evaluate(prep0, jc, kc)
                over = np.minimum(kc, b) - np.maximum(jc, a)
                self.slope = over / (np.sqrt(kc - jc) * stat.sigma)

    def values(self, mu):
        if mu in self._cache:
            return self._cache[mu]
        if self.restricted and self.linear:
            v = self.t0 + mu * self.slope
        else:
            prep = self.stat.prepare(self.inject(mu))
            if self.restricted:
                v = self.stat.evaluate(prep, self.jc, self.kc)
            else:
                v = per_length_max(self.stat, prep, self.L, self.d)
        self._cache[mu] = v
        return v

    def rejects(self, cal: str, mu: float) -> bool:
        if mu == 0.0 or self.null_reject[cal]:
            return self.null_reject[cal]
        thr = self.cand_thr[cal] if self.restricted else self.grid_thr[cal]
        return bool(np.any(self.values(mu) > thr))

    def exact_linear(self, cal: str) -> float:
        """Closed-form minimal amplitude for the Gaussian-known statistic."""
        if not (self.restricted and self.linear):
            raise ValueError("closed form only for the Gaussian-known statistic")
        if self.null_reject[cal]:
            return 0.0
        pos = self.slope > 0
        return float(np.min((self.cand_thr[cal][pos] - self.t0[pos]) / self.slope[pos]))


def _grid_thresholds(tables, stat, source):
    L, _ = source.grid()
    len_index = np.full(int(L.max()) + 1, -1, dtype=np.int64)
    len_index[L] = np.arange(L.size)
    return {c: _thresholds_on(t, L, stat, source) for c, t in tables.items()}, len_index


def replicate_stream(seed: int, r: int, length: int) -> RngStream:
    return RngStream(seed, r, (length,))


def _run_range(stat, model, source, tables, length, seed, start, stop, rel_tol):
    grid_thr, len_index = _grid_thresholds(tables, stat, source)
    names = list(tables)
    out = np.empty((stop - start, len(names)))
    flags = np.zeros((stop - start, len(names)), dtype=bool)
    for i, r in enumerate(range(start, stop)):
        stream = replicate_stream(seed, r, length)
        null = model.sample(source.n, stream)
        interval = tuple(random_signal_placement(source.n, length, stream))
        prob = ReplicateProblem(stat, model, source, grid_thr, len_index, null, interval, stream)
        for c_i, c in enumerate(names):
            res = min_mu(lambda mu, c=c: prob.rejects(c, mu), rel_tol=rel_tol)
            out[i, c_i] = res.mu
            flags[i, c_i] = not res.monotone_ok
    return out, flags


def run_power_study(
    stat: LocalStat,
    model: NullModel,
    source: IntervalSource,
    tables: dict,
    lengths,
    replicates: int,
    seed: int,
    workers: int = 1,
    chunk: int = 100,
    rel_tol: float = REL_TOL,
    progress=None,
) -> list:
    """PowerResult for every (calibration, length); replicate r of length L
    uses stream (seed, r, L) regardless of scheduling."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    names = list(tables)
    for c, t in tables.items():
        if t.n != source.n:
            raise ValueError(f"table {c} has n={t.n}, source has n={source.n}")
    results = []
    noise = model.noise_scale()
    for length in lengths:
        length = int(length)
        if not 1 <= length <= source.max_window:
            raise ValueError(f"signal length {length} exceeds the max window {source.max_window}")
        bounds = [(a, min(a + chunk, replicates)) for a in range(0, replicates, chunk)]
        parts = []
        try:
            if workers > 1 and len(bounds) > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    futs = [
                        pool.submit(_run_range, stat, model, source, tables, length, seed, a, b, rel_tol)
                        for a, b in bounds
                    ]
                    for f in futs:
                        parts.append(f.result())
                        if progress:
                            progress(length, sum(p[0].shape[0] for p in parts))
            else:
                for a, b in bounds:
                    parts.append(_run_range(stat, model, source, tables, length, seed, a, b, rel_tol))
                    if progress:
                        progress(length, b)
        except Exception as exc:
            raise PowerStudyError(f"power replicate failed at length {length}: {exc}", results) from exc
        mus = np.concatenate([p[0] for p in parts])
        flags = np.concatenate([p[1] for p in parts])
        for c_i, c in enumerate(names):
            col = mus[:, c_i] / noise
            mu80 = numerics.empirical_quantile(col, POWER)
            results.append(
                PowerResult(
                    n=source.n,
                    signal_length=length,
                    calibration=c,
                    model=model.name,
                    replicates=replicates,
                    mu_min=mu80,
                    e_n=realized_exponent_value(source.n, length, mu80),
                    seed=seed,
                    non_monotone=int(flags[:, c_i].sum()),
                    per_replicate=col,
                )
            )
    return results


def realized_exponent(n, length, table: CritTable, stat, model, replicates, seed, source=None, workers=1) -> PowerResult:
    source = source or table.source()
    return run_power_study(stat, model, source, {table.calibration: table}, [length], replicates, seed, workers)[0]


def power_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["calibration", "signal_length", "mu_min", "e_n", "replicates", "seed"])
    for r in results:
        w.writerow([r.calibration, r.signal_length, f"{r.mu_min:.6f}", f"{r.e_n:.6f}", r.replicates, r.seed])
    return buf.getvalue()


def emit_table(results) -> str:
    """Exponents laid out with calibrations as rows and signal lengths as columns."""
    if not results:
        raise ValueError("no results to tabulate")
    ns = {r.n for r in results}
    models = {r.model for r in results}
    if len(ns) > 1 or len(models) > 1:
        raise ValueError(f"results mix n={sorted(ns)} and models={sorted(models)}")
    lengths = sorted({r.signal_length for r in results})
    cals = list(dict.fromkeys(r.calibration for r in results))
    cell = {(r.calibration, r.signal_length): r.e_n for r in results}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["calibration", *lengths])
    for c in cals:
        w.writerow([c, *(f"{cell[(c, L)]:.2f}" if (c, L) in cell else "" for L in lengths)])
    return buf.getvalue()
