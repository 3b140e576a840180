"""Exact minimum-cost one-to-one assignment (Hungarian with potentials).

Shortest-augmenting-path formulation, O(rows^2 * cols). Rows must not exceed
columns. Ties resolve toward the smallest column index because candidate
columns are scanned in order with a strict improvement test.
"""

from __future__ import annotations

import itertools

import numpy as np


def solve_assignment(cost: np.ndarray) -> list[int]:
    """cost (n, m) with n <= m -> column assigned to each row."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise ValueError(f"more rows ({n}) than columns ({m})")
    if not np.isfinite(cost).all():
        raise ValueError("assignment costs must be finite")

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row matched to column j (1-based)
    way = np.zeros(m + 1, dtype=np.int64)

    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    result = [-1] * n
    for j in range(1, m + 1):
        if p[j] > 0:
            result[p[j] - 1] = j - 1
    return result


def brute_force_assignment(cost: np.ndarray) -> tuple[list[int], float]:
    """Exhaustive minimum over all injections rows -> columns.

    Iterates permutations in lexicographic order and keeps strict
    improvements, so on ties the lexicographically smallest assignment wins.
    Intended as a test oracle for small instances.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best_cols: list[int] | None = None
    best_total = np.inf
    rows = np.arange(n)
    for cols in itertools.permutations(range(m), n):
        total = cost[rows, list(cols)].sum()
        if total < best_total:
            best_total = total
            best_cols = list(cols)
    if best_cols is None:
        return [], 0.0
    return best_cols, float(best_total)
