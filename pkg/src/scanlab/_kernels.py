"""Compiled inner loops. Everything here is a pure function of its arrays."""

import numba
import numpy as np


@numba.njit(cache=True)
def compensated_cumsum(x):
    out = np.empty(x.shape[0] + 1)
    out[0] = 0.0
    s = 0.0
    c = 0.0
    for i in range(x.shape[0]):
        v = x[i]
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
        out[i + 1] = s + c
    return out


@numba.njit(cache=True, fastmath=True)
def _unit_stride_max(S, L, n):
    cnt = n - L + 1
    m0 = -np.inf
    m1 = -np.inf
    m2 = -np.inf
    m3 = -np.inf
    j = 0
    while j + 4 <= cnt:
        m0 = max(m0, S[j + L] - S[j])
        m1 = max(m1, S[j + 1 + L] - S[j + 1])
        m2 = max(m2, S[j + 2 + L] - S[j + 2])
        m3 = max(m3, S[j + 3 + L] - S[j + 3])
        j += 4
    while j < cnt:
        m0 = max(m0, S[j + L] - S[j])
        j += 1
    return max(max(m0, m1), max(m2, m3))


@numba.njit(cache=True)
def grid_window_max(S, lengths, steps):
    """For each (L, d): max of S[j + L] - S[j] over j = 0, d, 2d, ... with j + L <= n."""
    n = S.shape[0] - 1
    out = np.empty(lengths.shape[0])
    for t in range(lengths.shape[0]):
        L = lengths[t]
        d = steps[t]
        if d == 1:
            out[t] = _unit_stride_max(S, L, n)
        else:
            m = -np.inf
            for j in range(0, n - L + 1, d):
                v = S[j + L] - S[j]
                if v > m:
                    m = v
            out[t] = m
    return out


@numba.njit(cache=True)
def grid_window_max_batch(S2, lengths, steps):
    """Row-wise ``grid_window_max`` for a (replicates, n + 1) prefix matrix."""
    out = np.empty((S2.shape[0], lengths.shape[0]))
    for r in range(S2.shape[0]):
        out[r] = grid_window_max(S2[r], lengths, steps)
    return out


@numba.njit(cache=True)
def self_normalized_tilde(y, j, k):
    """Differenced values Y_i - mean(Y over J_i) for i in (j, k].

    The complement of (j, k] is taken in index order, its trailing
    ``n mod |I|`` entries are dropped, and the r-th index of the interval
    receives complement positions r, r + |I|, r + 2|I|, ...
    """
    n = y.shape[0]
    L = k - j
    p = n // L
    out = np.zeros(L)
    if p < 2:
        return out
    ncomp = L * (p - 1)
    for t in range(ncomp):
        idx = t if t < j else t + L
        out[t % L] -= y[idx]
    for r in range(L):
        out[r] = y[j + r] + out[r] / (p - 1)
    return out


@numba.njit(cache=True)
def self_normalized_many(y, js, ks):
    out = np.empty(js.shape[0])
    for t in range(js.shape[0]):
        yt = self_normalized_tilde(y, js[t], ks[t])
        num = 0.0
        den = 0.0
        for r in range(yt.shape[0]):
            num += yt[r]
            den += yt[r] * yt[r]
        if den <= 0.0:
            out[t] = np.nan
        else:
            out[t] = num / np.sqrt(den)
    return out
