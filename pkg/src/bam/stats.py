"""Significance testing over multi-seed trial grids."""

from __future__ import annotations

import itertools
import math
import statistics

import numpy as np

from .sampling import rng_stream

EXACT_MAX_N = 12
MIN_TRIALS = 5


def median_of_trials(scores):
    scores = list(scores)
    if not scores:
        raise ValueError("median of no trials")
    return statistics.median(scores)


def bootstrap_test(a, b, resamples=10_000, seed=0):
    """One-sided p-value that ``a`` scores higher than ``b``.

    Both sides are resampled with replacement; the statistic is the
    difference of medians and ``p = (1 + #{diff <= 0}) / (B + 1)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < MIN_TRIALS or len(b) < MIN_TRIALS:
        raise ValueError(f"bootstrap_test needs >= {MIN_TRIALS} trials per side, got {len(a)} and {len(b)}")
    if resamples < 1000:
        raise ValueError("bootstrap_test needs at least 1000 resamples")
    rng = rng_stream(seed, "bootstrap")
    ia = rng.integers(0, len(a), size=(resamples, len(a)))
    ib = rng.integers(0, len(b), size=(resamples, len(b)))
    diff = np.median(a[ia], axis=1) - np.median(b[ib], axis=1)
    return (1 + int(np.count_nonzero(diff <= 0))) / (resamples + 1)


def _u_matrix(values):
    v = np.asarray(values, dtype=np.float64)
    return (v[:, None] > v[None, :]) + 0.5 * (v[:, None] == v[None, :])


def u_statistic(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sum(a[:, None] > b[None, :]) + 0.5 * np.sum(a[:, None] == b[None, :]))


def mann_whitney_u(a, b):
    """``(U_a, two-sided p)``; exact by enumeration when ``len(a) + len(b) <= 12``.

    Larger samples use the normal approximation with tie correction and
    a 0.5 continuity correction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("mann_whitney_u needs two nonempty samples")
    u = u_statistic(a, b)
    mean = na * nb / 2.0
    n = na + nb
    if n <= EXACT_MAX_N:
        return u, _exact_p(np.concatenate([a, b]), na, u, mean)
    _, counts = np.unique(np.concatenate([a, b]), return_counts=True)
    tie = float(np.sum(counts**3 - counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    return u, min(1.0, math.erfc(z / math.sqrt(2.0)))


def _exact_p(pooled, na, u_obs, mean):
    n = len(pooled)
    g = _u_matrix(pooled)
    masks = np.zeros((math.comb(n, na), n))
    for k, combo in enumerate(itertools.combinations(range(n), na)):
        masks[k, list(combo)] = 1.0
    us = np.einsum("ci,ij,cj->c", masks, g, 1.0 - masks)
    extreme = np.abs(us - mean) >= abs(u_obs - mean) - 1e-9
    return float(np.count_nonzero(extreme)) / len(us)


def holm_bonferroni(p_values, alpha=0.05):
    """Step-down Holm correction. Returns ``(reject flags, adjusted p)`` in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    reject = np.zeros(m, dtype=bool)
    adjusted = np.zeros(m)
    running = 0.0
    stopped = False
    for rank, i in enumerate(order):
        k = m - rank
        if not stopped and p[i] <= alpha / k:
            reject[i] = True
        else:
            stopped = True
        running = max(running, min(1.0, k * p[i]))
        adjusted[i] = running
    return reject.tolist(), adjusted.tolist()


def stars(p):
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
