"""Mini-batch optimal transport between prior and data batches."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from tsflow._accel import lsa_solve

__all__ = ["Assignment", "cost_matrix", "assign", "batch_w2", "random_coupling_cost"]


@dataclass(frozen=True)
class Assignment:
    perm: np.ndarray
    total_cost: float


def cost_matrix(x0, x1) -> np.ndarray:
    """Squared Euclidean costs ``C[i, j] = ||x0[i] - x1[j]||^2``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if x1.ndim == 1:
        x1 = x1[:, None]
    if x0.shape != x1.shape:
        raise ValueError(f"batch shape mismatch: {x0.shape} vs {x1.shape}")
    # explicit differences keep identical rows at exactly zero cost
    diff = x0[:, None, :] - x1[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def assign(cost) -> Assignment:
    """Exact minimum-cost perfect matching of a square cost matrix.

    Among optimal permutations the lexicographically smallest one is returned,
    so degenerate (tied) costs still give a reproducible answer.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    n = cost.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.intp), 0.0)
    perm, u, v = lsa_solve(cost)
    reduced = cost - u[:, None] - v[None, :]
    tol = 1e-10 * max(1.0, float(np.abs(cost).max()))
    perm = _lex_smallest(reduced <= tol, perm)
    total = float(cost[np.arange(n), perm].sum())
    return Assignment(perm, total)


def _lex_smallest(tight: np.ndarray, perm: np.ndarray) -> np.ndarray:
    # Every optimal matching lives on the tight edges of an optimal dual, so
    # fix rows in order, moving each to its smallest tight column that still
    # admits a perfect matching (found as an alternating cycle).
    n = len(perm)
    perm = perm.copy()
    owner = np.empty(n, dtype=np.intp)
    owner[perm] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    nbrs = [np.flatnonzero(tight[r]) for r in range(n)]
    for i in range(n):
        target = perm[i]
        for j in nbrs[i]:
            if j >= target:
                break
            if fixed[j]:
                continue
            path = _alternating_path(nbrs, owner, fixed, owner[j], j, target)
            if path is None:
                continue
            rows = [i, owner[j]] + [owner[c] for c in path[:-1]]
            cols = [j] + path
            for r, c in zip(rows, cols):
                perm[r] = c
                owner[c] = r
            break
        fixed[perm[i]] = True
    return perm


def _alternating_path(nbrs, owner, fixed, start_row, banned, target):
    parent = {}
    seen = np.zeros(len(owner), dtype=bool)
    seen[banned] = True
    queue = deque([(start_row, None)])
    while queue:
        row, via = queue.popleft()
        for c in nbrs[row]:
            if seen[c] or fixed[c]:
                continue
            seen[c] = True
            parent[c] = via
            if c == target:
                path = [c]
                while parent[path[-1]] is not None:
                    path.append(parent[path[-1]])
                return [int(x) for x in reversed(path)]
            queue.append((owner[c], c))
    return None


def batch_w2(x0, x1) -> float:
    """Mean per-sample squared transport cost of the optimal batch matching."""
    cost = cost_matrix(x0, x1)
    return assign(cost).total_cost / cost.shape[0]


def random_coupling_cost(x0, x1) -> float:
    """Expected per-sample cost of a uniformly random pairing."""
    return float(cost_matrix(x0, x1).mean())
