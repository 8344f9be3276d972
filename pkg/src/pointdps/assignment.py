"""Exact linear assignment and the random upsampling operator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import as_generator


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """Row ``i`` of the cost matrix is matched to column ``mapping[i]``."""

    mapping: np.ndarray
    cost: float

    def inverse(self, n_cols: int) -> np.ndarray:
        """Column -> row lookup, ``-1`` for unmatched columns."""
        inv = np.full(n_cols, -1, dtype=np.intp)
        inv[self.mapping] = np.arange(len(self.mapping))
        return inv


def _check_cost(cost) -> np.ndarray:
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise AssignmentError(f"cost must be 2D, got shape {c.shape}")
    if c.shape[0] > c.shape[1]:
        raise AssignmentError(f"infeasible: {c.shape[0]} rows but only {c.shape[1]} columns")
    if not np.all(np.isfinite(c)):
        raise AssignmentError("cost matrix has non-finite entries")
    return c


def _shortest_augmenting_path(c: np.ndarray) -> np.ndarray:
    """Rectangular shortest augmenting path (Jonker-Volgenant style).

    Dual potentials ``u`` (rows) and ``v`` (columns) are kept feasible; each
    row is inserted with one Dijkstra sweep over reduced costs. Ties go to
    the lowest column index.
    """
    n_rows, n_cols = c.shape
    u = np.zeros(n_rows)
    v = np.zeros(n_cols)
    row_of_col = np.full(n_cols, -1, dtype=np.intp)
    col_of_row = np.full(n_rows, -1, dtype=np.intp)

    for cur_row in range(n_rows):
        shortest = np.full(n_cols, np.inf)
        pred = np.full(n_cols, -1, dtype=np.intp)
        scanned_cols = np.zeros(n_cols, dtype=bool)
        visited_rows = [cur_row]
        i = cur_row
        min_val = 0.0
        sink = -1
        while sink < 0:
            reduced = min_val + c[i] - u[i] - v
            better = ~scanned_cols & (reduced < shortest)
            shortest[better] = reduced[better]
            pred[better] = i
            masked = np.where(scanned_cols, np.inf, shortest)
            j = int(np.argmin(masked))
            min_val = masked[j]
            scanned_cols[j] = True
            if row_of_col[j] < 0:
                sink = j
            else:
                i = row_of_col[j]
                visited_rows.append(i)

        # Update duals so reduced costs stay nonnegative.
        u[cur_row] += min_val
        for r in visited_rows[1:]:
            u[r] += min_val - shortest[col_of_row[r]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]

        j = sink
        while True:
            i = pred[j]
            row_of_col[j] = i
            col_of_row[i], j = j, col_of_row[i]
            if i == cur_row:
                break
    return col_of_row


def solve_lap(cost, method: str = "scipy") -> Assignment:
    """Minimum-cost assignment of every row of an ``L x N`` cost (L <= N).

    ``method="scipy"`` uses :func:`scipy.optimize.linear_sum_assignment`;
    ``method="native"`` runs the pure numpy solver above. Both are exact.
    """
    c = _check_cost(cost)
    if c.shape[0] == 0:
        return Assignment(np.zeros(0, dtype=np.intp), 0.0)
    if method == "scipy":
        rows, cols = linear_sum_assignment(c)
        mapping = np.empty(c.shape[0], dtype=np.intp)
        mapping[rows] = cols
    elif method == "native":
        mapping = _shortest_augmenting_path(c)
    else:
        raise ValueError(f"unknown LAP method {method!r}")
    total = float(c[np.arange(c.shape[0]), mapping].sum())
    return Assignment(mapping, total)


@dataclass(frozen=True)
class Upsampler:
    """Index map of the 0/1 operator ``U``: output row ``i`` is ``y[indices[i]]``."""

    indices: np.ndarray
    n_source: int

    def __len__(self) -> int:
        return len(self.indices)


def make_upsampler(m: int, n: int, rng) -> Upsampler:
    """Draw ``n`` row indices into a source of ``m`` points.

    For ``n >= m`` a random permutation of all source points comes first so
    every observed point is used; the remainder is drawn with replacement.
    For ``n < m`` the draw is ``n`` distinct points.
    """
    if m < 1 or n < 1:
        raise ValueError("upsampler sizes must be positive")
    gen = as_generator(rng)
    if n >= m:
        idx = np.concatenate([gen.permutation(m), gen.integers(0, m, size=n - m)])
    else:
        idx = gen.choice(m, size=n, replace=False)
    return Upsampler(idx.astype(np.intp), m)


def identity_upsampler(n: int) -> Upsampler:
    return Upsampler(np.arange(n, dtype=np.intp), n)


def apply_upsampler(upsampler: Upsampler, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if len(y) != upsampler.n_source:
        raise AssignmentError(
            f"upsampler expects {upsampler.n_source} source points, got {len(y)}"
        )
    return y[upsampler.indices]
