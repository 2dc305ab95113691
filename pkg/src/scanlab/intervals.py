"""Interval collections: the full set, the sparse approximating set, and
the dyadic grouping of window lengths into blocks.

Intervals are half-open on the left, ``(j, k]`` with ``0 <= j < k <= n``,
so the observations they cover are ``y[j:k]`` in 0-based indexing.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

SCHEMA_LEVEL_COLUMNS = ("level", "j", "k")


@dataclass(frozen=True, order=True)
class Interval:
    j: int
    k: int

    def __post_init__(self):
        if not (0 <= self.j < self.k):
            raise ValueError(f"invalid interval ({self.j}, {self.k}]")

    @property
    def length(self) -> int:
        return self.k - self.j

    def check(self, n: int) -> "Interval":
        if self.k > n:
            raise ValueError(f"interval ({self.j}, {self.k}] exceeds n={n}")
        return self

    def __iter__(self):
        yield self.j
        yield self.k


def grid_spacing(n: int, m: int) -> int:
    """Endpoint spacing for lengths in [m, 2m): ceil(m / sqrt(2 log(e n / m)))."""
    return max(1, math.ceil(m / math.sqrt(2.0 * math.log(math.e * n / m))))


def dyadic_offset(n: int) -> int:
    """s_n = ceil(log2(log n)); block 1 holds lengths below 2**s_n."""
    return math.ceil(math.log2(math.log(n)))


@dataclass(frozen=True)
class BlockPartition:
    n: int
    s_n: int
    B_max: int

    def length_range(self, B: int) -> tuple[int, int]:
        """Half-open range [lo, hi) of lengths in block B."""
        if not 1 <= B <= self.B_max:
            raise ValueError(f"block {B} outside 1..{self.B_max}")
        if B == 1:
            return 1, 2**self.s_n
        return 2 ** (B - 2 + self.s_n), 2 ** (B - 1 + self.s_n)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        return [self.length_range(B) for B in range(1, self.B_max + 1)]

    @property
    def covered_max(self) -> int:
        """Largest length inside some block."""
        return 2 ** (self.B_max - 1 + self.s_n) - 1

    def block_of_length(self, w):
        """Block index of each length; lengths past the last block fold into B_max."""
        w = np.asarray(w, dtype=np.int64)
        if np.any(w < 1):
            raise ValueError("lengths must be >= 1")
        b = np.where(
            w < 2**self.s_n,
            1,
            np.floor(np.log2(np.maximum(w, 1))).astype(np.int64) - self.s_n + 2,
        )
        # float log2 can land just under an exact power of two
        b = np.where((b >= 2) & (w >= 2 ** (b - 1 + self.s_n)), b + 1, b)
        return np.minimum(b, self.B_max)


def blocks(n: int) -> BlockPartition:
    if n < 16:
        raise ValueError(f"blocks need n >= 16, got {n}")
    s_n = dyadic_offset(n)
    B_max = ((n // 4).bit_length() - 1) - s_n + 1
    if B_max < 1:
        raise ValueError(f"n={n} gives B_max={B_max} < 1")
    return BlockPartition(n=n, s_n=s_n, B_max=B_max)


@dataclass(frozen=True)
class ApproxLevel:
    level: int
    m: int
    d: int
    # number of grid lengths kept (shortest first); None keeps every
    # multiple of d in [m, 2m)
    n_lengths: int | None = None

    @property
    def all_lengths(self) -> np.ndarray:
        first = -(-self.m // self.d) * self.d
        return np.arange(first, 2 * self.m, self.d, dtype=np.int64)

    @property
    def lengths(self) -> np.ndarray:
        out = self.all_lengths
        return out if self.n_lengths is None else out[: self.n_lengths]

    def count(self, n: int) -> int:
        L = self.lengths
        L = L[L <= n]
        return int(np.sum((n - L) // self.d + 1))

    def arrays(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        js, ks = [], []
        for L in self.lengths:
            if L > n:
                continue
            j = np.arange(0, n - L + 1, self.d, dtype=np.int64)
            js.append(j)
            ks.append(j + L)
        if not js:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty
        return np.concatenate(js), np.concatenate(ks)


class IntervalSource:
    """Common surface of the full and the approximating interval collections.

    Subclasses define ``n``, ``max_window``, ``grid()`` and ``iter_chunks()``.
    """

    name = "abstract"
    n: int
    max_window: int

    @cached_property
    def partition(self) -> BlockPartition:
        return blocks(self.n)

    @property
    def n_blocks(self) -> int:
        return self.partition.B_max

    def block_of_length(self, w):
        return self.partition.block_of_length(w)

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(lengths, steps): every interval is (j, j + L] with j a multiple of the step."""
        raise NotImplementedError

    def grid_counts(self) -> np.ndarray:
        L, d = self.grid()
        return (self.n - L) // d + 1

    def block_sizes(self) -> np.ndarray:
        L, _ = self.grid()
        b = self.block_of_length(L)
        return np.bincount(b, weights=self.grid_counts(), minlength=self.n_blocks + 1)[1:].astype(np.int64)

    def size(self) -> int:
        return int(self.grid_counts().sum())

    def iter_chunks(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        L, d = self.grid()
        for length, step in zip(L.tolist(), d.tolist()):
            j = np.arange(0, self.n - length + 1, step, dtype=np.int64)
            yield j, j + length

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        js, ks = zip(*self.iter_chunks())
        return np.concatenate(js), np.concatenate(ks)

    def intersecting(self, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        """All intervals of the collection that overlap (a, b]."""
        L, d = self.grid()
        js, ks = [], []
        for length, step in zip(L.tolist(), d.tolist()):
            lo = max(0, a - length + 1)
            hi = min(self.n - length, b - 1)
            lo = -(-lo // step) * step
            if lo > hi:
                continue
            j = np.arange(lo, hi + 1, step, dtype=np.int64)
            js.append(j)
            ks.append(j + length)
        if not js:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty
        return np.concatenate(js), np.concatenate(ks)

    def describe(self) -> dict:
        return {"source": self.name, "n": self.n, "max_window": self.max_window}


@dataclass(frozen=True, eq=False)
class FullSet(IntervalSource):
    """All intervals with length up to ``max_window``."""

    n: int
    max_window: int
    name: str = field(default="full", init=False)

    def __post_init__(self):
        if not 1 <= self.max_window <= self.n:
            raise ValueError(f"max_window must lie in 1..{self.n}")

    def grid(self):
        L = np.arange(1, self.max_window + 1, dtype=np.int64)
        return L, np.ones_like(L)


@dataclass(frozen=True, eq=False)
class ApproxSet(IntervalSource):
    """Union of the per-level grids; level l has lengths in [2**l, 2**(l+1))
    and endpoints on multiples of its spacing d_l."""

    n: int
    max_window: int
    levels: tuple[ApproxLevel, ...]
    name: str = field(default="approx", init=False)

    @cached_property
    def partition(self) -> BlockPartition:
        s_n = dyadic_offset(self.n)
        top = self.levels[-1].level
        B_max = 1 if top < s_n else top - s_n + 2
        return BlockPartition(n=self.n, s_n=s_n, B_max=B_max)

    def block_of_level(self, level: int) -> int:
        s_n = self.partition.s_n
        return 1 if level < s_n else level - s_n + 2

    def level_of_length(self, w: int) -> ApproxLevel:
        ell = int(w).bit_length() - 1
        for lev in self.levels:
            if lev.level == ell:
                return lev
        raise ValueError(f"no level covers length {w}")

    @cached_property
    def _grid(self):
        Ls, ds = [], []
        for lev in self.levels:
            L = lev.lengths
            L = L[L <= self.n]
            Ls.append(L)
            ds.append(np.full_like(L, lev.d))
        return np.concatenate(Ls), np.concatenate(ds)

    def grid(self):
        return self._grid

    def level_counts(self) -> list[int]:
        return [lev.count(self.n) for lev in self.levels]

    def iter_levels(self) -> Iterator[tuple[ApproxLevel, np.ndarray, np.ndarray]]:
        for lev in self.levels:
            j, k = lev.arrays(self.n)
            yield lev, j, k

    def describe(self) -> dict:
        out = super().describe()
        out["levels"] = [(lev.level, lev.m, lev.d) for lev in self.levels]
        return out


def _cap_level(lev: ApproxLevel, n: int) -> ApproxLevel:
    """Keep the shortest grid lengths while the level size stays within
    2 n 2^-l log(e 2^-l n). The grid can hold ceil(m/d) lengths where the
    counting argument behind that bound allows m/d, so the longest length is
    occasionally dropped."""
    bound = level_count_bound(n, lev.level)
    L = lev.all_lengths
    L = L[L <= n]
    sizes = np.cumsum((n - L) // lev.d + 1)
    keep = int(np.searchsorted(sizes, bound, side="right"))
    if keep == L.size:
        return lev
    return ApproxLevel(lev.level, lev.m, lev.d, n_lengths=max(1, keep))


def build_approx_set(
    n: int, max_window_fraction: float = 0.25, *, spacing=grid_spacing, capped: bool = True
) -> ApproxSet:
    """Approximating set with every level whose longest length fits under the cap.

    ``spacing`` is injectable so that verification can be exercised on a
    deliberately corrupted grid.
    """
    if n < 8:
        raise ValueError(f"build_approx_set needs n >= 8, got {n}")
    if not 0.0 < max_window_fraction <= 0.5:
        raise ValueError("max_window_fraction must lie in (0, 1/2]")
    max_window = int(math.floor(max_window_fraction * n))
    levels = []
    ell = 0
    while 2 * 2**ell - 1 <= max_window:
        m = 2**ell
        lev = ApproxLevel(level=ell, m=m, d=int(spacing(n, m)))
        if capped:
            lev = _cap_level(lev, n)
        levels.append(lev)
        ell += 1
    if not levels:
        raise ValueError(f"n={n} with fraction {max_window_fraction} admits no interval")
    return ApproxSet(n=n, max_window=max_window, levels=tuple(levels))


def full_set(n: int, max_window_fraction: float = 0.25) -> FullSet:
    return FullSet(n=n, max_window=max(1, int(math.floor(max_window_fraction * n))))


def enumerate_full(n: int, max_len: int) -> Iterator[Interval]:
    """Every (j, k] with k - j <= max_len, ordered by length then left endpoint."""
    if not 1 <= max_len <= n:
        raise ValueError(f"max_len must lie in 1..{n}")
    for w in range(1, max_len + 1):
        for j in range(0, n - w + 1):
            yield Interval(j, j + w)


def overlap_ratio(I, J) -> float:
    """|I ∩ J| / sqrt(|I| |J|)."""
    (a, b), (c, d) = tuple(I), tuple(J)
    inter = max(0, min(b, d) - max(a, c))
    return inter / math.sqrt((b - a) * (d - c))


def overlap_bounds(w_min: float, n: int) -> tuple[float, float]:
    """The square-root and the linearised lower bounds on the best overlap ratio,
    evaluated at the shorter of the two lengths."""
    lg = math.log(math.e * n / w_min)
    x = 2.0 / math.sqrt(2.0 * lg)
    root = math.sqrt(1.0 - x) if x < 1.0 else 0.0
    linear = 1.0 - 1.0 / math.sqrt(2.0 * lg) - 1.0 / lg
    return root, linear


def _level_candidates(j, k, lev: ApproxLevel, n: int):
    """Candidate (left, right) endpoint arrays of shape (len(j), C) for one level.

    Only grid points next to the endpoints of I, or an admissible length away
    from such a grid point, can be optimal: for a fixed opposite endpoint the
    ratio is unimodal in each endpoint.
    """
    d = lev.d
    Ls = lev.lengths
    Ls = Ls[Ls <= n]
    steps = np.array([-1, 0, 1, 2], dtype=np.int64) * d
    kk = (k // d * d)[:, None] + steps
    jj = (j // d * d)[:, None] + steps
    pair_j = np.repeat(jj, 4, axis=1)
    pair_k = np.tile(kk, (1, 4))
    from_k_j = (kk[:, :, None] - Ls[None, None, :]).reshape(len(j), -1)
    from_k_k = np.repeat(kk, Ls.size, axis=1)
    from_j_j = np.repeat(jj, Ls.size, axis=1)
    from_j_k = (jj[:, :, None] + Ls[None, None, :]).reshape(len(j), -1)
    cj = np.concatenate([pair_j, from_k_j, from_j_j], axis=1)
    ck = np.concatenate([pair_k, from_k_k, from_j_k], axis=1)
    L = ck - cj
    ok = (cj >= 0) & (ck <= n) & (cj % d == 0) & (L % d == 0)
    if Ls.size:
        ok &= (L >= Ls[0]) & (L <= Ls[-1])
    else:
        ok[:] = False
    return cj, ck, ok


def best_approximation_many(js, ks, approx: ApproxSet):
    """Vectorised best approximation: arrays (left, right, ratio).

    The best J maximises |I n J| / sqrt(|I||J|); ties go to the smallest left
    endpoint, then the smallest length.
    """
    j = np.asarray(js, dtype=np.int64)
    k = np.asarray(ks, dtype=np.int64)
    n = approx.n
    if np.any(j < 0) or np.any(k > n) or np.any(j >= k):
        raise ValueError(f"interval out of range for n={n}")
    top = int(approx.levels[-1].lengths.max())
    if np.any(k - j > max(top, 2 * approx.levels[-1].m - 1)):
        raise ValueError("|I| exceeds the longest length of the set")
    parts = [_level_candidates(j, k, lev, n) for lev in approx.levels]
    cj = np.concatenate([p[0] for p in parts], axis=1)
    ck = np.concatenate([p[1] for p in parts], axis=1)
    ok = np.concatenate([p[2] for p in parts], axis=1)
    inter = np.clip(np.minimum(k[:, None], ck) - np.maximum(j[:, None], cj), 0, None)
    L = ck - cj
    with np.errstate(invalid="ignore", divide="ignore"):
        r = inter / np.sqrt((k - j)[:, None] * np.where(ok, L, 1))
    r = np.where(ok, r, -np.inf)
    if not np.all(ok.any(axis=1)):
        raise ValueError("no candidate interval in the set")
    order = np.lexsort((np.where(ok, L, n + 1), np.where(ok, cj, n + 1), -r), axis=-1)
    pick = order[:, 0]
    rows = np.arange(j.size)
    return cj[rows, pick], ck[rows, pick], r[rows, pick]


def best_approximation(I, approx: ApproxSet) -> tuple[Interval, float]:
    """Interval of the set with the largest overlap ratio to I."""
    j, k = tuple(I)
    if not 0 <= j < k <= approx.n:
        raise ValueError(f"interval ({j}, {k}] out of range for n={approx.n}")
    bj, bk, r = best_approximation_many([j], [k], approx)
    return Interval(int(bj[0]), int(bk[0])), float(r[0])


@dataclass
class CheckReport:
    checks: list = field(default_factory=list)

    def add(self, name: str, value: float, bound: float, ok: bool | None = None):
        if ok is None:
            ok = value <= bound
        self.checks.append({"check": name, "value": value, "bound": bound, "ok": bool(ok)})

    @property
    def violations(self) -> list:
        return [c for c in self.checks if not c["ok"]]

    @property
    def passed(self) -> bool:
        return not self.violations


def level_count_bound(n: int, level: int) -> float:
    return 2.0 * n * 2.0**-level * math.log(math.e * 2.0**-level * n)


def verify_count_bounds(approx: ApproxSet) -> CheckReport:
    """Compare level and block sizes with their closed-form upper bounds."""
    n = approx.n
    report = CheckReport()
    for lev, cnt in zip(approx.levels, approx.level_counts()):
        report.add(f"level {lev.level}", cnt, level_count_bound(n, lev.level))
    for B, size in enumerate(approx.block_sizes().tolist(), start=1):
        bound = 4.0 * n * math.log(math.e * n) if B == 1 else 8.0 * n * 2.0**-B
        report.add(f"block {B}", size, bound)
    return report


def verify_approximation(approx: ApproxSet, intervals, chunk: int = 4096) -> CheckReport:
    """Check both overlap lower bounds for every given interval."""
    report = CheckReport()
    n = approx.n
    worst_root = math.inf
    worst_lin = math.inf
    bad = 0
    count = 0
    it = iter(intervals)
    while True:
        batch = list(itertools.islice(it, chunk))
        if not batch:
            break
        j = np.fromiter((b[0] for b in batch), dtype=np.int64, count=len(batch))
        k = np.fromiter((b[1] for b in batch), dtype=np.int64, count=len(batch))
        bj, bk, r = best_approximation_many(j, k, approx)
        w = np.minimum(k - j, bk - bj).astype(float)
        lg = np.log(math.e * n / w)
        x = 2.0 / np.sqrt(2.0 * lg)
        root = np.sqrt(np.clip(1.0 - x, 0.0, None))
        linear = 1.0 - 1.0 / np.sqrt(2.0 * lg) - 1.0 / lg
        # one ulp of slack on the equality cases (J == I gives r == 1)
        fail = (r + 1e-12 < root) | (r + 1e-12 < linear)
        for i in np.nonzero(fail)[0][: max(0, 20 - bad)]:
            report.add(f"interval ({j[i]},{k[i]}]", float(r[i]), float(root[i]), ok=False)
        bad += int(fail.sum())
        count += len(batch)
        worst_root = min(worst_root, float(np.min(r - root)))
        worst_lin = min(worst_lin, float(np.min(r - linear)))
    report.add("intervals checked", count, count, ok=True)
    report.add("min margin over sqrt bound", worst_root, 0.0, ok=worst_root >= -1e-12)
    report.add("min margin over linear bound", worst_lin, 0.0, ok=worst_lin >= -1e-12)
    report.add("violations", bad, 0, ok=bad == 0)
    return report


def all_intervals_up_to(n: int, max_len: int) -> Iterator[tuple[int, int]]:
    for w in range(1, max_len + 1):
        for j in range(0, n - w + 1):
            yield j, j + w


def sample_intervals(n: int, max_len: int, count: int, rng: np.random.Generator) -> Iterator[tuple[int, int]]:
    """Intervals drawn uniformly from all (j, k] with k - j <= max_len."""
    w = np.arange(1, max_len + 1)
    weights = (n - w + 1).astype(float)
    lengths = rng.choice(w, size=count, p=weights / weights.sum())
    starts = (rng.random(count) * (n - lengths + 1)).astype(np.int64)
    for j, L in zip(starts.tolist(), lengths.tolist()):
        yield j, j + L
