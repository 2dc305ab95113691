"""Null data generation and signal injection.

Every draw is a pure function of (model, n, master seed, stream index), so
replicate r produces the same data no matter which worker runs it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .intervals import Interval

SEED_ENV = "SCANLAB_SEED"
DEFAULT_SEED = 20210701

# substream tags below a replicate
TAG_DATA = 0
TAG_PLACEMENT = 1


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw not in (None, "") else DEFAULT_SEED


@dataclass(frozen=True)
class RngStream:
    """Counter-based stream keyed by (master seed, replicate index, tags)."""

    seed: int
    index: int = 0
    tags: tuple = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.index, *self.tags))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, tag: int) -> "RngStream":
        return RngStream(self.seed, self.index, (*self.tags, tag))


def _open_uniforms(gen: np.random.Generator, n: int) -> np.ndarray:
    u = gen.random(n)
    u[u == 0.0] = 2.0**-54
    return u


def poisson_ppf(u, mean: float) -> np.ndarray:
    """Inverse CDF of Poisson(mean) through a cumulative table and a binary search."""
    if mean < 0 or not np.isfinite(mean):
        raise ValueError(f"Poisson mean must be finite and >= 0, got {mean}")
    u = np.asarray(u, dtype=float)
    if mean == 0:
        return np.zeros_like(u)
    kmax = int(mean + 40.0 * np.sqrt(mean) + 40)
    cdf = stats.poisson.cdf(np.arange(kmax + 1), mean)
    idx = np.searchsorted(cdf, u, side="left")
    return np.minimum(idx, kmax).astype(float)


class NullModel:
    name = "abstract"
    discrete = False

    def sample(self, n: int, stream: RngStream) -> np.ndarray:
        raise NotImplementedError

    def sample_batch(self, reps: int, n: int, stream: RngStream) -> np.ndarray:
        """(reps, n) draws from a single stream; for bulk tail checks only."""
        return np.stack([self.sample(n, stream.child(r)) for r in range(reps)])

    def injector(self, null_draw, interval, stream: RngStream):
        """Callable mu -> data with signal mu on the interval."""
        raise NotImplementedError

    def noise_scale(self) -> float:
        """Null standard deviation, used to standardise signal amplitudes."""
        return 1.0

    def describe(self) -> dict:
        return {"model": self.name}


class Gaussian(NullModel):
    name = "gaussian"

    def __init__(self, sigma: float = 1.0):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)

    def sample(self, n, stream):
        return self.sigma * stream.child(TAG_DATA).generator().standard_normal(n)

    def sample_batch(self, reps, n, stream):
        return self.sigma * stream.child(TAG_DATA).generator().standard_normal((reps, n))

    def injector(self, null_draw, interval, stream):
        base = np.asarray(null_draw, dtype=float)
        j, k = tuple(interval)

        def at(mu):
            out = base.copy()
            out[j:k] += mu
            return out

        return at

    def noise_scale(self):
        return self.sigma

    def describe(self):
        return {"model": self.name, "sigma": self.sigma}


class _InverseCdfModel(NullModel):
    """Count models drawn as F^{-1}(U_i) with U_i fixed per (replicate, index)."""

    discrete = True

    def baseline(self) -> float:
        raise NotImplementedError

    def ppf(self, u, mean):
        raise NotImplementedError

    def uniforms(self, n, stream):
        return _open_uniforms(stream.child(TAG_DATA).generator(), n)

    def sample(self, n, stream):
        return self.ppf(self.uniforms(n, stream), self.baseline())

    def sample_batch(self, reps, n, stream):
        u = _open_uniforms(stream.child(TAG_DATA).generator(), reps * n)
        return self.ppf(u, self.baseline()).reshape(reps, n)

    def injector(self, null_draw, interval, stream):
        base = np.asarray(null_draw, dtype=float)
        j, k = tuple(interval)
        u = self.uniforms(base.size, stream)[j:k]
        b = self.baseline()

        def at(mu):
            out = base.copy()
            if np.all(np.asarray(mu) == 0):
                return out
            out[j:k] = self.ppf(u, b + mu)
            return out

        return at


class Poisson(_InverseCdfModel):
    name = "poisson"

    def __init__(self, rate: float = 1.0):
        if not rate > 0:
            raise ValueError("Poisson rate must be positive")
        self.rate = float(rate)

    def baseline(self):
        return self.rate

    def ppf(self, u, mean):
        mean = np.asarray(mean, dtype=float)
        if mean.ndim == 0:
            return poisson_ppf(u, float(mean))
        return np.array([poisson_ppf(ui, mi)[()] for ui, mi in zip(u, mean)])

    def noise_scale(self):
        return float(np.sqrt(self.rate))

    def describe(self):
        return {"model": self.name, "rate": self.rate}


class Bernoulli(_InverseCdfModel):
    name = "bernoulli"

    def __init__(self, p: float = 0.5):
        if not 0.0 < p < 1.0:
            raise ValueError("Bernoulli p must lie in (0, 1)")
        self.p = float(p)

    def baseline(self):
        return self.p

    def ppf(self, u, mean):
        mean = np.asarray(mean, dtype=float)
        if np.any(mean > 1.0) or np.any(mean < 0.0):
            raise ValueError(f"Bernoulli success probability out of range: {mean}")
        return (np.asarray(u) > 1.0 - mean).astype(float)

    def noise_scale(self):
        return float(np.sqrt(self.p * (1.0 - self.p)))

    def describe(self):
        return {"model": self.name, "p": self.p}


class PluginExpFam(_InverseCdfModel):
    """Count model at the mean of an observed series (the null MLE)."""

    def __init__(self, family: str, data):
        data = np.asarray(data, dtype=float)
        self.family = family
        self.mean = float(data.mean())
        if family == "poisson":
            self._inner = Poisson(self.mean) if self.mean > 0 else None
        elif family == "bernoulli":
            if not 0.0 < self.mean < 1.0:
                raise ValueError("plug-in Bernoulli needs a non-constant 0/1 series")
            self._inner = Bernoulli(self.mean)
        else:
            raise ValueError(f"no sampler for family {family!r}")
        self.name = f"plugin_{family}"

    def baseline(self):
        return self.mean

    def ppf(self, u, mean):
        if self._inner is None:
            return np.zeros_like(np.asarray(u, dtype=float))
        return self._inner.ppf(u, mean)

    def describe(self):
        return {"model": self.name, "mean": self.mean}


class Permutation(NullModel):
    name = "permutation"

    def __init__(self, source):
        self.source = np.asarray(source, dtype=float).copy()

    def sample(self, n, stream):
        if n != self.source.size:
            raise ValueError("permutation null needs n equal to the source length")
        return stream.child(TAG_DATA).generator().permutation(self.source)

    def sample_batch(self, reps, n, stream):
        gen = stream.child(TAG_DATA).generator()
        return gen.permuted(np.broadcast_to(self.source, (reps, n)), axis=1)

    def describe(self):
        return {"model": self.name, "n_source": int(self.source.size)}


class Zero(NullModel):
    """Degenerate noiseless null, for plumbing tests."""

    name = "zero"

    def sample(self, n, stream):
        return np.zeros(n)

    def injector(self, null_draw, interval, stream):
        return Gaussian().injector(null_draw, interval, stream)


MODELS = {"gaussian": Gaussian, "poisson": Poisson, "bernoulli": Bernoulli, "zero": Zero}


def make_model(name: str, **kw) -> NullModel:
    if name == "gaussian":
        return Gaussian(kw.get("sigma", 1.0))
    if name == "poisson":
        return Poisson(kw.get("rate", 1.0))
    if name == "bernoulli":
        return Bernoulli(kw.get("p", 0.5))
    if name == "zero":
        return Zero()
    raise ValueError(f"unknown null model {name!r}; choose from {sorted(MODELS)}")


def sample_null(model: NullModel, n: int, stream: RngStream) -> np.ndarray:
    return model.sample(n, stream)


def inject_signal(null_draw, interval, mu, model: NullModel, stream: RngStream) -> np.ndarray:
    j, k = tuple(interval)
    if not 0 <= j < k <= len(null_draw):
        raise ValueError("signal interval out of range")
    if np.any(np.asarray(mu) < 0):
        raise ValueError("signal amplitude must be >= 0")
    return model.injector(null_draw, (j, k), stream)(mu)


def random_signal_placement(n: int, length: int, stream: RngStream) -> Interval:
    if not 1 <= length <= n:
        raise ValueError(f"signal length must lie in 1..{n}")
    j = int(stream.child(TAG_PLACEMENT).generator().integers(0, n - length + 1))
    return Interval(j, j + length)
