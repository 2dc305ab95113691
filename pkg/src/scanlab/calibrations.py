"""The five calibrations of the scan: critical values, their simulation and
persistence, and the rejection engine.

Calibration names used throughout: ``scan`` (one global threshold), ``ds``
and ``sac`` (penalty curve plus a simulated offset), ``blocked`` (per-block
simulated quantiles at harmonic levels) and ``bonferroni`` (per-block union
bound on the approximating set, no simulation).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from ._kernels import grid_window_max
from .intervals import IntervalSource, build_approx_set, full_set
from .local_stats import LocalStat, stat_key
from .null_models import NullModel, RngStream

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CALIBRATIONS = ("scan", "ds", "sac", "blocked", "bonferroni")
SIMULATED = ("scan", "ds", "sac", "blocked")
ALPHA_GRID_STEP = 1e-3


def penalty_ds(n, w):
    w = np.asarray(w, dtype=float)
    out = np.sqrt(2.0 * np.log(math.e * n / w))
    return float(out) if out.ndim == 0 else out


def penalty_sac(n, w):
    w = np.asarray(w, dtype=float)
    out = np.sqrt(2.0 * np.log(math.e * n / w * (1.0 + np.log(w)) ** 2))
    return float(out) if out.ndim == 0 else out


def harmonic(m: int) -> float:
    return math.fsum(1.0 / i for i in range(1, m + 1))


def make_source(kind: str, n: int, max_window_fraction: float = 0.25) -> IntervalSource:
    if kind == "approx":
        return build_approx_set(n, max_window_fraction)
    if kind == "full":
        return full_set(n, max_window_fraction)
    raise ValueError(f"unknown interval source {kind!r}")


@dataclass(frozen=True)
class Calibration:
    variant: str
    source: str = "approx"
    alpha: float = 0.10
    n_sims: int = 10_000
    seed: int = 0
    max_window_fraction: float = 0.25

    def __post_init__(self):
        if self.variant not in CALIBRATIONS:
            raise ValueError(f"unknown calibration {self.variant!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def simulated(self) -> bool:
        return self.variant in SIMULATED


# ---------------------------------------------------------------------------
# null simulation


@dataclass
class NullRecords:
    """Per-replicate maxima from one pass over the interval set."""

    global_max: np.ndarray
    ds_max: np.ndarray
    sac_max: np.ndarray
    block_max: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_sims(self) -> int:
        return int(self.global_max.shape[0])


class _MaximaReducer:
    """Turns per-length maxima of T into the recorded summary maxima."""

    def __init__(self, source: IntervalSource):
        n = source.n
        self.lengths, self.steps = source.grid()
        self.pen_ds = penalty_ds(n, self.lengths)
        self.pen_sac = penalty_sac(n, self.lengths)
        b = np.asarray(source.block_of_length(self.lengths))
        if np.any(np.diff(b) < 0):
            raise AssertionError("grid lengths must be sorted by block")
        self.block_starts = np.searchsorted(b, np.arange(1, source.n_blocks + 1))
        self.n_blocks = source.n_blocks

    def reduce(self, t_by_length):
        return (
            float(t_by_length.max()),
            float(np.max(t_by_length - self.pen_ds)),
            float(np.max(t_by_length - self.pen_sac)),
            np.maximum.reduceat(t_by_length, self.block_starts),
        )


def per_length_max(stat: LocalStat, prep, lengths, steps) -> np.ndarray:
    """max over intervals of each grid length of T_I, via the maximal window sum."""
    best = grid_window_max(prep.prefix.S, lengths, steps)
    return stat.from_sums(best, lengths, prep)


def _simulate_range(stat, source, model, seed, start, stop):
    red = _MaximaReducer(source)
    m = stop - start
    g = np.empty(m)
    ds = np.empty(m)
    sac = np.empty(m)
    bl = np.empty((m, red.n_blocks))
    for i, r in enumerate(range(start, stop)):
        data = model.sample(source.n, RngStream(seed, r))
        prep = stat.prepare(data)
        t = per_length_max(stat, prep, red.lengths, red.steps)
        g[i], ds[i], sac[i], bl[i] = red.reduce(t)
    return g, ds, sac, bl


def _check_simulable(stat: LocalStat):
    if not stat.simulable:
        raise ValueError(
            f"statistic {stat.name!r} has no simulable null (unknown heteroscedastic noise); "
            "only the bonferroni calibration applies"
        )
    if not stat.monotone_in_sum:
        raise ValueError(f"statistic {stat.name!r} is not monotone in the interval sum")


def simulate_null_maxima(
    stat: LocalStat,
    source: IntervalSource,
    model: NullModel,
    n_sims: int,
    seed: int,
    workers: int = 1,
    chunk: int = 250,
) -> NullRecords:
    """Simulate ``n_sims`` null series and record, per replicate, the global
    maximum of T_I, the maxima of T_I minus the DS and SAC penalties, and the
    maximum within each block. Replicate r always uses stream r of ``seed``."""
    _check_simulable(stat)
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    bounds = [(a, min(a + chunk, n_sims)) for a in range(0, n_sims, chunk)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_simulate_range, stat, source, model, seed, a, b) for a, b in bounds]
            parts = [f.result() for f in futs]
    else:
        parts = [_simulate_range(stat, source, model, seed, a, b) for a, b in bounds]
    g, ds, sac, bl = (np.concatenate(x) for x in zip(*parts))
    meta = {
        "n": source.n,
        "stat": stat_key(stat),
        "model": model.describe(),
        "source": source.name,
        "max_window": source.max_window,
        "n_sims": n_sims,
        "seed": seed,
    }
    return NullRecords(g, ds, sac, bl, meta)


# ---------------------------------------------------------------------------
# critical value tables


@dataclass
class CritTable:
    meta: dict
    entries: list

    @property
    def calibration(self) -> str:
        return self.meta["calibration"]

    @property
    def n(self) -> int:
        return int(self.meta["n"])

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **self.meta, "entries": self.entries}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CritTable":
        d = dict(d)
        if d.pop("schema_version", None) != SCHEMA_VERSION:
            raise ValueError("unsupported critical-value table schema")
        entries = d.pop("entries")
        return cls(meta=d, entries=entries)

    @classmethod
    def from_json(cls, text: str) -> "CritTable":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "CritTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def source(self) -> IntervalSource:
        return make_source(self.meta["source"], self.n, self.meta["max_window_fraction"])

    def thresholds(self, lengths, stat: LocalStat | None = None, source: IntervalSource | None = None):
        """Rejection threshold for T_I as a function of |I|."""
        lengths = np.asarray(lengths, dtype=np.int64)
        cal = self.calibration
        n = self.n
        if cal == "scan":
            return np.full(lengths.shape, float(self.entries[0]["threshold"]))
        if cal in ("ds", "sac"):
            pen = penalty_ds if cal == "ds" else penalty_sac
            return pen(n, lengths) + float(self.entries[0]["threshold"])
        source = source or self.source()
        blocks = np.asarray(source.block_of_length(lengths))
        per_block = np.array([e["threshold"] for e in sorted(self.entries, key=lambda e: e["block"])])
        out = per_block[blocks - 1]
        if cal == "bonferroni" and stat is not None and stat.tail_depends_on_length:
            levels = {e["block"]: e["level"] for e in self.entries}
            uniq, inv = np.unique(lengths, return_inverse=True)
            vals = np.array(
                [stat.threshold_for_level(levels[int(b)], int(w), n) for w, b in zip(uniq, source.block_of_length(uniq))]
            )
            out = vals[inv]
        return out

    @property
    def hash(self) -> str:
        return meta_hash(self.meta)


def meta_hash(meta: dict) -> str:
    payload = json.dumps(meta, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def table_meta(cal: Calibration, stat: LocalStat, model: NullModel | None, source: IntervalSource) -> dict:
    return {
        "n": source.n,
        "calibration": cal.variant,
        "alpha": cal.alpha,
        "n_sims": cal.n_sims if cal.simulated else 0,
        "seed": cal.seed if cal.simulated else None,
        "max_window": source.max_window,
        "max_window_fraction": cal.max_window_fraction,
        "source": source.name,
        "stat": stat_key(stat),
        "model": model.describe() if (model is not None and cal.simulated) else None,
    }


@dataclass
class BlockedCalibration:
    alpha_tilde: float
    thresholds: np.ndarray
    achieved: float
    feasible: bool


def _block_thresholds(sorted_cols: np.ndarray, alpha_tilde: float) -> np.ndarray:
    M, B = sorted_cols.shape
    out = np.empty(B)
    for b in range(B):
        rank = numerics.upper_rank(1.0 - alpha_tilde / (b + 1), M)
        out[b] = sorted_cols[rank - 1, b]
    return out


def achieved_level(block_max: np.ndarray, thresholds: np.ndarray) -> float:
    return float(np.mean(np.any(block_max > thresholds[None, :], axis=1)))


def calibrate_blocked_alpha(block_max, alpha: float, step: float = ALPHA_GRID_STEP) -> BlockedCalibration:
    """Largest alpha_tilde on the grid whose per-block (1 - alpha_tilde/B)
    quantiles give an overall empirical level of at most ``alpha``."""
    block_max = np.asarray(block_max, dtype=float)
    if block_max.ndim != 2:
        raise ValueError("block maxima must be (replicates, blocks)")
    cols = np.sort(block_max, axis=0)
    if block_max.shape[1] == 1:
        thr = _block_thresholds(cols, alpha)
        return BlockedCalibration(alpha, thr, achieved_level(block_max, thr), True)
    n_grid = int(round(1.0 / step))

    def level_at(i):
        thr = _block_thresholds(cols, i / n_grid)
        return achieved_level(block_max, thr), thr

    lo, hi = 0, n_grid  # lo feasible (sentinel), hi tested later
    if level_at(1)[0] > alpha:
        lev, thr = level_at(1)
        warnings.warn("no feasible alpha_tilde on the grid; using the smallest grid value")
        return BlockedCalibration(1 / n_grid, thr, lev, False)
    lo = 1
    if level_at(n_grid)[0] <= alpha:
        lo = n_grid
    else:
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if level_at(mid)[0] <= alpha:
                lo = mid
            else:
                hi = mid
    lev, thr = level_at(lo)
    return BlockedCalibration(lo / n_grid, thr, lev, True)


def bonferroni_level(B: int, block_size: int, B_max: int, alpha: float) -> float:
    if block_size < 1 or not 1 <= B <= B_max:
        raise ValueError("invalid block for the Bonferroni level")
    return alpha / (block_size * B * harmonic(B_max))


def bonferroni_threshold(B, block_size, B_max, alpha, stat: LocalStat, length=None, n=None) -> float:
    level = bonferroni_level(B, block_size, B_max, alpha)
    if level <= 0.0 or not math.isfinite(level):
        raise ValueError("Bonferroni level underflowed to zero")
    return stat.threshold_for_level(level, length, n)


def bonferroni_table(cal: Calibration, stat: LocalStat, source: IntervalSource) -> CritTable:
    sizes = source.block_sizes()
    B_max = source.n_blocks
    entries = []
    L, _ = source.grid()
    blk = np.asarray(source.block_of_length(L))
    for B, size in enumerate(sizes.tolist(), start=1):
        level = bonferroni_level(B, size, B_max, cal.alpha)
        shortest = int(L[blk == B].min())
        thr = stat.threshold_for_level(level, shortest, source.n)
        entries.append({"kind": "block", "block": B, "threshold": float(thr), "level": level, "size": int(size)})
    return CritTable(meta=table_meta(cal, stat, None, source), entries=entries)


def build_crit_table(cal: Calibration, records: NullRecords | None, stat: LocalStat, source: IntervalSource, model=None) -> CritTable:
    if cal.variant == "bonferroni":
        return bonferroni_table(cal, stat, source)
    if records is None:
        raise ValueError(f"calibration {cal.variant!r} needs simulated null records")
    rm = records.meta
    if rm.get("n") != source.n or rm.get("source") != source.name or rm.get("stat") != stat_key(stat):
        raise ValueError("null records do not match the requested table")
    if rm.get("max_window") != source.max_window:
        raise ValueError("null records were simulated with a different max window")
    meta = table_meta(cal, stat, model, source)
    meta["n_sims"] = records.n_sims
    meta["seed"] = rm.get("seed")
    meta["model"] = rm.get("model")
    q = 1.0 - cal.alpha
    if cal.variant == "scan":
        entries = [{"kind": "scalar", "threshold": numerics.empirical_quantile(records.global_max, q)}]
    elif cal.variant == "ds":
        entries = [{"kind": "offset", "threshold": numerics.empirical_quantile(records.ds_max, q)}]
    elif cal.variant == "sac":
        entries = [{"kind": "offset", "threshold": numerics.empirical_quantile(records.sac_max, q)}]
    else:
        bc = calibrate_blocked_alpha(records.block_max, cal.alpha)
        meta["alpha_tilde"] = bc.alpha_tilde
        meta["achieved_level"] = bc.achieved
        meta["alpha_tilde_feasible"] = bc.feasible
        entries = [
            {"kind": "block", "block": B, "threshold": float(t), "level": bc.alpha_tilde / B}
            for B, t in enumerate(bc.thresholds.tolist(), start=1)
        ]
    return CritTable(meta=meta, entries=entries)


def get_tables(
    variants,
    stat: LocalStat,
    model: NullModel,
    source: IntervalSource,
    alpha: float = 0.10,
    n_sims: int = 10_000,
    seed: int = 0,
    max_window_fraction: float = 0.25,
    cache_dir=None,
    force: bool = False,
    workers: int = 1,
) -> dict:
    """Tables for several calibrations, sharing one null simulation and an
    optional on-disk cache keyed by the full table metadata."""
    cals = {v: Calibration(v, source.name, alpha, n_sims, seed, max_window_fraction) for v in variants}
    tables = {}
    todo = []
    for v, cal in cals.items():
        meta = table_meta(cal, stat, model, source)
        path = Path(cache_dir) / f"{v}_{meta_hash(meta)}.json" if cache_dir else None
        if path is not None and path.exists() and not force:
            tables[v] = CritTable.load(path)
            log.info("loaded cached %s table from %s", v, path)
        else:
            todo.append((v, cal, path))
    records = None
    if any(cal.simulated for _, cal, _ in todo):
        if n_sims < 1:
            raise ValueError("simulated calibrations need --sims >= 1")
        records = simulate_null_maxima(stat, source, model, n_sims, seed, workers=workers)
    for v, cal, path in todo:
        tables[v] = build_crit_table(cal, records, stat, source, model)
        if path is not None:
            tables[v].save(path)
    return {v: tables[v] for v in variants}


# ---------------------------------------------------------------------------
# rejection engine


@dataclass
class TestDecision:
    reject: bool
    exceed_j: np.ndarray
    exceed_k: np.ndarray
    exceed_stat: np.ndarray
    exceed_threshold: np.ndarray
    argmax: tuple
    argmax_stat: float
    argmax_threshold: float

    @property
    def n_exceeding(self) -> int:
        return int(self.exceed_j.shape[0])

    def to_dict(self, limit: int | None = 1000) -> dict:
        sl = slice(None) if limit is None else slice(0, limit)
        return {
            "reject": self.reject,
            "n_exceeding": self.n_exceeding,
            "argmax": {"j": int(self.argmax[0]), "k": int(self.argmax[1]), "stat": self.argmax_stat, "threshold": self.argmax_threshold},
            "exceeding": [
                {"j": int(a), "k": int(b), "stat": float(t), "threshold": float(c)}
                for a, b, t, c in zip(self.exceed_j[sl], self.exceed_k[sl], self.exceed_stat[sl], self.exceed_threshold[sl])
            ],
        }


def run_test(data, stat: LocalStat, table: CritTable, source: IntervalSource | None = None) -> TestDecision:
    """Evaluate T_I over the table's interval set and compare with its thresholds."""
    data = np.asarray(data, dtype=float)
    if data.shape[0] != table.n:
        raise ValueError(f"data length {data.shape[0]} does not match table n={table.n}")
    if table.meta.get("stat") != stat_key(stat):
        raise ValueError(f"table was built for statistic {table.meta.get('stat')!r}, not {stat_key(stat)!r}")
    source = source or table.source()
    prep = stat.prepare(data)
    L, _ = source.grid()
    c_by_len = dict(zip(L.tolist(), table.thresholds(L, stat, source).tolist()))
    ex = ([], [], [], [])
    best = (-math.inf, (0, 0), math.nan, math.nan)
    for j, k in source.iter_chunks():
        if j.size == 0:
            continue
        t = stat.evaluate(prep, j, k)
        c = c_by_len[int(k[0] - j[0])]
        gap = t - c
        i = int(np.argmax(gap))
        if gap[i] > best[0]:
            best = (float(gap[i]), (int(j[i]), int(k[i])), float(t[i]), float(c))
        hit = gap > 0
        if np.any(hit):
            ex[0].append(j[hit])
            ex[1].append(k[hit])
            ex[2].append(t[hit])
            ex[3].append(np.full(int(hit.sum()), c))
    cat = [np.concatenate(x) if x else np.empty(0) for x in ex]
    return TestDecision(
        reject=bool(cat[0].size),
        exceed_j=cat[0].astype(np.int64),
        exceed_k=cat[1].astype(np.int64),
        exceed_stat=cat[2],
        exceed_threshold=cat[3],
        argmax=best[1],
        argmax_stat=best[2],
        argmax_threshold=best[3],
    )


def critical_value_curve(tables: dict, lengths, stat: LocalStat | None = None) -> dict:
    """Effective threshold per window length for each table, for plotting."""
    return {name: tab.thresholds(lengths, stat) for name, tab in tables.items()}
