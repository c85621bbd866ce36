"""Exact square assignment: Hungarian algorithm plus an exhaustive oracle.

Both solvers break cost ties the same way: the lexicographically smallest
permutation (row 0's column first) among all optimal ones.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Assignment:
    perm: tuple  # perm[i] = column assigned to row i
    total_cost: float


def _validate(C) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {C.shape}")
    bad = np.argwhere(~np.isfinite(C))
    if len(bad):
        i, j = bad[0]
        raise ValueError(f"non-finite cost at ({i}, {j}): {C[i, j]}")
    return C


def _tol(C: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(np.abs(C).max()) if C.size else 1.0)


def _potentials(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian method; returns optimal duals (u, v)."""
    n = len(C)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j] = row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    return u[1:], v[1:]


def _can_match(tight: np.ndarray, rows: list, cols: list) -> bool:
    """Does the tight-edge graph restricted to rows x cols have a perfect matching?"""
    match = {}

    def augment(r, seen):
        for c in cols:
            if tight[r, c] and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian(C) -> Assignment:
    """Minimum-cost perfect matching of a square cost matrix."""
    C = _validate(C)
    n = len(C)
    if n == 0:
        return Assignment((), 0.0)
    if n == 1:
        return Assignment((0,), float(C[0, 0]))
    u, v = _potentials(C)
    # every perfect matching on zero-reduced-cost edges is optimal
    tight = (C - u[:, None] - v[None, :]) <= _tol(C)
    perm: list[int] = []
    free = list(range(n))
    for i in range(n):
        for j in free:
            if not tight[i, j]:
                continue
            rest = [c for c in free if c != j]
            if _can_match(tight, list(range(i + 1, n)), rest):
                perm.append(j)
                free = rest
                break
        else:  # pragma: no cover - duals are optimal, so a tight matching exists
            raise RuntimeError("no tight perfect matching; dual solution is inconsistent")
    return Assignment(tuple(perm), float(C[np.arange(n), perm].sum()))


_PERMS: dict[int, np.ndarray] = {}


def _all_perms(n: int) -> np.ndarray:
    if n not in _PERMS:
        _PERMS[n] = np.array(list(itertools.permutations(range(n))), dtype=int).reshape(-1, n)
    return _PERMS[n]


def brute_force_assignment(C) -> Assignment:
    """Exhaustive search over all permutations (n <= 9).

    Returns the lexicographically first permutation whose cost is within
    tolerance of the minimum.
    """
    C = _validate(C)
    n = len(C)
    if n > 9:
        raise ValueError(f"brute force limited to n <= 9, got n={n}")
    if n == 0:
        return Assignment((), 0.0)
    perms = _all_perms(n)  # itertools order is lexicographic
    totals = C[np.arange(n), perms].sum(axis=1)
    k = int(np.argmax(totals <= totals.min() + _tol(C)))
    return Assignment(tuple(int(j) for j in perms[k]), float(totals[k]))


def hungarian_batch(costs) -> np.ndarray:
    """Optimal permutations for a stack of cost matrices (B, n, n) -> (B, n).

    For n <= 3 the n! candidates are scored in one vectorized pass, taking
    the first permutation (lexicographic order) within tolerance of the
    minimum; larger n falls back to :func:`hungarian` per matrix.
    """
    costs = np.asarray(costs, dtype=np.float64)
    B, n, _ = costs.shape
    if n > 3:
        return np.array([hungarian(c).perm for c in costs], dtype=int).reshape(B, n)
    if not np.all(np.isfinite(costs)):
        b, i, j = np.argwhere(~np.isfinite(costs))[0]
        raise ValueError(f"non-finite cost at ({i}, {j}) of matrix {b}")
    perms = _all_perms(n)
    totals = costs[:, np.arange(n)[None, :], perms].sum(axis=-1)  # (B, n!)
    tol = 1e-9 * np.maximum(1.0, np.abs(costs).reshape(B, -1).max(axis=1))
    ok = totals <= totals.min(axis=1, keepdims=True) + tol[:, None]
    return perms[np.argmax(ok, axis=1)]
