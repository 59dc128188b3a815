"""Numeric inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``AD_AUDIT_DISABLE_NUMBA`` is
unset (or "0").  Both paths are always importable as ``<name>_numba`` and
``<name>_numpy`` so tests and the benchmark can compare them directly; the
unsuffixed public names point at whichever path is active.
"""

from __future__ import annotations

import math
import os

import numpy as np

_SQRT_2PI = math.sqrt(2.0 * math.pi)

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get("AD_AUDIT_DISABLE_NUMBA", "0") in ("", "0")


# ---------------------------------------------------------------------------
# Gaussian KDE on a grid


def kde_grid_numpy(samples, grid, h):
    samples = np.asarray(samples, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.float64)
    out = np.empty(grid.shape[0])
    # chunk over the grid to bound memory at n * chunk
    chunk = 256
    norm = 1.0 / (samples.shape[0] * h * _SQRT_2PI)
    for start in range(0, grid.shape[0], chunk):
        z = (grid[start:start + chunk, None] - samples[None, :]) / h
        out[start:start + chunk] = np.exp(-0.5 * z * z).sum(axis=1) * norm
    return out


@njit(cache=True)
def kde_grid_numba(samples, grid, h):
    n = samples.shape[0]
    out = np.empty(grid.shape[0])
    norm = 1.0 / (n * h * _SQRT_2PI)
    for g in range(grid.shape[0]):
        acc = 0.0
        x = grid[g]
        for i in range(n):
            z = (x - samples[i]) / h
            acc += math.exp(-0.5 * z * z)
        out[g] = acc * norm
    return out


# ---------------------------------------------------------------------------
# First local maximum and the first local minimum after it.
# Strict comparisons against the nearest differing neighbours, so a flat
# plateau resolves to its leftmost point.


def first_max_then_min_numpy(density):
    d = np.asarray(density, dtype=np.float64)
    n = d.shape[0]
    # collapse runs of equal values, keeping the leftmost index of each run
    keep = np.ones(n, dtype=bool)
    keep[1:] = d[1:] != d[:-1]
    idx = np.flatnonzero(keep)
    v = d[idx]
    if v.shape[0] < 3:
        return -1, -1
    inner = np.arange(1, v.shape[0] - 1)
    is_max = (v[inner] > v[inner - 1]) & (v[inner] > v[inner + 1])
    is_min = (v[inner] < v[inner - 1]) & (v[inner] < v[inner + 1])
    maxima = inner[is_max]
    if maxima.shape[0] == 0:
        return -1, -1
    first_max = maxima[0]
    minima = inner[is_min & (inner > first_max)]
    if minima.shape[0] == 0:
        return int(idx[first_max]), -1
    return int(idx[first_max]), int(idx[minima[0]])


@njit(cache=True)
def first_max_then_min_numba(density):
    n = density.shape[0]
    idx = np.empty(n, dtype=np.int64)
    m = 0
    for i in range(n):
        if i == 0 or density[i] != density[i - 1]:
            idx[m] = i
            m += 1
    if m < 3:
        return -1, -1
    first_max = -1
    for k in range(1, m - 1):
        a = density[idx[k - 1]]
        b = density[idx[k]]
        c = density[idx[k + 1]]
        if first_max < 0:
            if b > a and b > c:
                first_max = k
        elif b < a and b < c:
            return idx[first_max], idx[k]
    if first_max < 0:
        return -1, -1
    return idx[first_max], -1


# ---------------------------------------------------------------------------
# Session boundaries: start index of every session.


def session_starts_numpy(timestamps, theta):
    t = np.asarray(timestamps, dtype=np.float64)
    if t.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    breaks = np.flatnonzero(np.diff(t) > theta) + 1
    return np.concatenate((np.zeros(1, dtype=np.int64), breaks.astype(np.int64)))


@njit(cache=True)
def session_starts_numba(timestamps, theta):
    n = timestamps.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    out = np.empty(n, dtype=np.int64)
    out[0] = 0
    m = 1
    for i in range(1, n):
        if timestamps[i] - timestamps[i - 1] > theta:
            out[m] = i
            m += 1
    return out[:m]


# ---------------------------------------------------------------------------
# NB2 dispersion pieces.  With r = 1/alpha and integer y the gamma-function
# terms of the log-likelihood reduce to finite sums over j < y, written so
# that nothing cancels as alpha -> 0:
#   l0 = sum_j log1p(alpha*j)
#   s1 = sum_j (j - mu) / (1 + alpha*j)
#   s2 = sum_j j*(j - mu) / (1 + alpha*j)^2
# The numpy path evaluates the same sums on a masked (rows x max y) block.


def nb_alpha_sums_numpy(y, mu, alpha):
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    n = y.shape[0]
    l0 = np.zeros(n)
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    ymax = int(y.max()) if n else 0
    if ymax == 0:
        return l0, s1, s2
    j = np.arange(ymax, dtype=np.float64)
    rows = max(1, 4_000_000 // ymax)
    for start in range(0, n, rows):
        sl = slice(start, start + rows)
        mask = j[None, :] < y[sl, None]
        d = 1.0 + alpha * j[None, :]
        diff = j[None, :] - mu[sl, None]
        l0[sl] = np.where(mask, np.log1p(alpha * j)[None, :], 0.0).sum(axis=1)
        s1[sl] = np.where(mask, diff / d, 0.0).sum(axis=1)
        s2[sl] = np.where(mask, j[None, :] * diff / (d * d), 0.0).sum(axis=1)
    return l0, s1, s2


@njit(cache=True)
def nb_alpha_sums_numba(y, mu, alpha):
    n = y.shape[0]
    l0 = np.zeros(n)
    s1 = np.zeros(n)
    s2 = np.zeros(n)
    for i in range(n):
        k = int(y[i])
        m = mu[i]
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        for jj in range(k):
            j = float(jj)
            d = 1.0 + alpha * j
            a0 += math.log1p(alpha * j)
            a1 += (j - m) / d
            a2 += j * (j - m) / (d * d)
        l0[i] = a0
        s1[i] = a1
        s2[i] = a2
    return l0, s1, s2


# ---------------------------------------------------------------------------
# Per-cluster sums of score rows.


def cluster_sums_numpy(scores, codes, n_clusters):
    scores = np.asarray(scores, dtype=np.float64)
    out = np.zeros((n_clusters, scores.shape[1]))
    np.add.at(out, codes, scores)
    return out


@njit(cache=True)
def cluster_sums_numba(scores, codes, n_clusters):
    out = np.zeros((n_clusters, scores.shape[1]))
    for i in range(scores.shape[0]):
        c = codes[i]
        for j in range(scores.shape[1]):
            out[c, j] += scores[i, j]
    return out


if USE_NUMBA:
    kde_grid = kde_grid_numba
    first_max_then_min = first_max_then_min_numba
    session_starts = session_starts_numba
    nb_alpha_sums = nb_alpha_sums_numba
    cluster_sums = cluster_sums_numba
else:
    kde_grid = kde_grid_numpy
    first_max_then_min = first_max_then_min_numpy
    session_starts = session_starts_numpy
    nb_alpha_sums = nb_alpha_sums_numpy
    cluster_sums = cluster_sums_numpy


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
