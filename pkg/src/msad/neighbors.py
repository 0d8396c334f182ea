"""Exact nearest-neighbour search with a lower-index tie rule.

Two back ends share one contract (exact minima, ties resolved to the lowest
index): a k-d tree for low-dimensional point sets and a blocked GEMM search for
high-dimensional feature banks. Both re-verify candidates with directly computed
differences, so the returned distances equal ``||q - x||_2`` evaluated
term-by-term.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_BLOCK = 1024


def _exact_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def brute_force_nn(bank: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reference linear scan. O(n*m*d) memory-light loop over queries."""
    idx = np.empty(len(queries), dtype=np.intp)
    dist = np.empty(len(queries))
    for i, q in enumerate(queries):
        d = _exact_dist(bank, q)
        j = int(np.argmin(d))  # argmin returns the first occurrence
        idx[i], dist[i] = j, d[j]
    return idx, dist


def nn_search(
    bank: np.ndarray, queries: np.ndarray, exclude: tuple[int, int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest bank row for each query: ``(indices, distances)``.

    ``exclude=(lo, hi)`` hides bank rows ``lo:hi`` from the search. Candidates
    within a relative slack of the GEMM minimum are re-scored exactly, so GEMM
    cancellation error can never change the selected neighbour.
    """
    bank = np.asarray(bank, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or bank.ndim != 2 or bank.shape[1] != queries.shape[1]:
        raise ValueError(f"dimension mismatch: bank {bank.shape} vs queries {queries.shape}")
    visible = len(bank) - (exclude[1] - exclude[0] if exclude else 0)
    if visible <= 0:
        raise ValueError("empty bank")
    bank_sq = np.einsum("ij,ij->i", bank, bank)
    bank_sq_max = float(bank_sq.max())
    idx = np.empty(len(queries), dtype=np.intp)
    dist = np.empty(len(queries))
    for start in range(0, len(queries), _BLOCK):
        q = queries[start : start + _BLOCK]
        q_sq = np.einsum("ij,ij->i", q, q)
        # ||b||^2 - 2 q.b ranks bank rows like the squared distance
        d2 = q @ bank.T
        d2 *= -2.0
        d2 += bank_sq
        if exclude:
            d2[:, exclude[0] : exclude[1]] = np.inf
        best = d2.min(axis=1)
        slack = 4e-9 * (q_sq + bank_sq_max) + 1e-12
        cand_rows, cand_cols = np.nonzero(d2 <= (best + slack)[:, None])
        exact = np.sum((q[cand_rows] - bank[cand_cols]) ** 2, axis=1)
        # lexicographic (row, exact distance, column) -> first per row wins
        order = np.lexsort((cand_cols, exact, cand_rows))
        rows_sorted = cand_rows[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = rows_sorted[1:] != rows_sorted[:-1]
        pick = order[first]
        idx[start : start + len(q)] = cand_cols[pick]
        dist[start : start + len(q)] = np.sqrt(exact[pick])
    return idx, dist


class PointIndex:
    """Exact k-NN over a 3-D point set (k-d tree plus exact tie resolution)."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.tree = cKDTree(self.points)

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        queries = np.asarray(queries, dtype=np.float64)
        n = len(self.points)
        if n == 1:
            return np.zeros(len(queries), dtype=np.intp), _exact_dist(queries, self.points[0])
        d, i = self.tree.query(queries, k=2)
        idx = i[:, 0].astype(np.intp)
        exact0 = _exact_dist(queries, self.points[idx])
        exact1 = _exact_dist(queries, self.points[i[:, 1]])
        tied = np.nonzero(exact1 <= exact0 * (1 + 1e-12) + 1e-300)[0]
        for r in tied:
            cand = self.tree.query_ball_point(queries[r], r=float(d[r, 1]) * (1 + 1e-9) + 1e-12)
            cand = np.asarray(sorted(cand), dtype=np.intp)
            cd = _exact_dist(queries[r], self.points[cand])
            j = int(np.argmin(cd))
            idx[r] = cand[j]
            exact0[r] = cd[j]
        return idx, exact0

    def knn(self, k: int, exclude_self: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours of every indexed point, sorted by (distance, index)."""
        n = len(self.points)
        extra = 1 if exclude_self else 0
        if k < 1 or k + extra > n:
            raise ValueError(f"k={k} invalid for {n} points")
        kq = min(n, k + extra + 4)
        _, cand = self.tree.query(self.points, k=kq)
        cand = np.asarray(cand, dtype=np.intp).reshape(n, kq)
        rows = np.arange(n)
        d = _exact_dist(self.points[:, None, :], self.points[cand])
        if exclude_self:
            d = np.where(cand == rows[:, None], np.inf, d)
        order = np.lexsort((cand, d), axis=-1)
        sel = np.take_along_axis(cand, order[:, :k], axis=1)
        sel_d = np.take_along_axis(d, order[:, :k], axis=1)
        if kq < n:
            # unseen points are at least as far as the farthest finite candidate
            finite = np.where(np.isfinite(d), d, -np.inf).max(axis=1)
            unsafe = np.nonzero(~(finite > sel_d[:, -1] * (1 + 1e-12) + 1e-300))[0]
            for r in unsafe:
                full = _exact_dist(self.points, self.points[r])
                if exclude_self:
                    full[r] = np.inf
                o = np.lexsort((np.arange(n), full))[:k]
                sel[r], sel_d[r] = o, full[o]
        return sel, sel_d
