"""Wilcoxon-Mann-Whitney rank-sum test with exact and normal p-values."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import InsufficientData, InvariantViolation

UP, DOWN, NONE = "up", "down", "none"
EXACT_LIMIT = 400  # n_before * n_after at or below this uses the exact null


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=float)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _tie_sizes(values: np.ndarray) -> np.ndarray:
    _, counts = np.unique(values, return_counts=True)
    return counts


def rank_sum_null(doubled_ranks: np.ndarray, k: int) -> np.ndarray:
    """Count of k-subsets of the pooled sample for every doubled rank sum.

    ``out[s]`` is the number of ways to pick ``k`` of the pooled
    observations whose doubled ranks add up to ``s``.  Counts stay below
    C(40, 20) for the sizes routed here, so int64 is exact.
    """
    total = int(doubled_ranks.sum())
    counts = np.zeros((k + 1, total + 1), dtype=np.int64)
    counts[0, 0] = 1
    for taken, r in enumerate(doubled_ranks.astype(np.int64), start=1):
        for j in range(min(taken, k), 0, -1):
            counts[j, r:] += counts[j - 1, : total + 1 - r]
    return counts[k]


@dataclass(frozen=True)
class WMWResult:
    p_less: float
    p_greater: float
    direction: str
    u_after: float
    method: str


def wmw_pvalues(before: Sequence[float], after: Sequence[float],
                method: str = "auto") -> tuple[float, float, float, str]:
    """One-sided p-values for "after tends less" and "after tends greater".

    Returns (p_less, p_greater, U of the after sample, method used).
    """
    x = np.asarray(before, dtype=float)
    y = np.asarray(after, dtype=float)
    m, n = len(x), len(y)
    if m < 1 or n < 1:
        raise InsufficientData("insufficient data")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("WMW inputs must be finite")
    pooled = np.concatenate([x, y])
    ranks = midranks(pooled)
    u_after = ranks[m:].sum() - n * (n + 1) / 2.0
    if np.all(pooled == pooled[0]):
        return 0.5, 0.5, u_after, "degenerate"
    if method == "auto":
        method = "exact" if m * n <= EXACT_LIMIT else "normal"

    if method == "exact":
        doubled = np.rint(ranks * 2).astype(np.int64)
        # count subsets of the smaller side
        if n <= m:
            k, observed = n, int(doubled[m:].sum())
            flip = False
        else:
            k, observed = m, int(doubled[:m].sum())
            flip = True
        dist = rank_sum_null(doubled, k)
        total = dist.sum()
        p_ge = dist[observed:].sum() / total
        p_le = dist[: observed + 1].sum() / total
        # a large before-sample rank sum means the after sample tends less
        p_greater, p_less = (p_le, p_ge) if flip else (p_ge, p_le)
        return float(p_less), float(p_greater), u_after, "exact"

    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    N = m + n
    ties = _tie_sizes(pooled)
    tie_term = float(((ties ** 3) - ties).sum()) / (N * (N - 1))
    var = m * n / 12.0 * ((N + 1) - tie_term)
    mu = m * n / 2.0
    sd = math.sqrt(var)
    z_greater = (u_after - mu - 0.5) / sd
    z_less = (u_after - mu + 0.5) / sd
    p_greater = 0.5 * math.erfc(z_greater / math.sqrt(2))
    p_less = 0.5 * math.erfc(-z_less / math.sqrt(2))
    return p_less, p_greater, u_after, "normal"


def wmw_test(before: Sequence[float], after: Sequence[float], alpha: float = 0.5,
             method: str = "auto") -> WMWResult:
    """Decide whether the after sample moved up, down, or not at all.

    Both samples need at least three observations.
    """
    if len(before) < 3 or len(after) < 3:
        raise InsufficientData("insufficient data")
    p_less, p_greater, u, used = wmw_pvalues(before, after, method)
    up = p_greater < alpha
    down = p_less < alpha
    if up and down:
        raise InvariantViolation(
            f"both one-sided tests reject (p_less={p_less}, p_greater={p_greater}, alpha={alpha})")
    direction = UP if up else DOWN if down else NONE
    return WMWResult(float(p_less), float(p_greater), direction, float(u), used)
