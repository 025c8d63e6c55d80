"""Min-cost bipartite assignment (Hungarian method with potentials)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SENTINEL = 1e6


@dataclass
class Assignment:
    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)


def _solve_square(c: np.ndarray) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian on a square matrix.

    Returns the row->column assignment and the row/column potentials
    (u, v) of an optimal dual, so that c[i, j] - u[i] - v[j] >= 0 with
    equality on every assigned pair.
    """
    n = c.shape[0]
    inf = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row assigned to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = c[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            used_cols = np.nonzero(used)[0]
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = [0] * n
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _lexicographic_tight_matching(tight: np.ndarray) -> list[int] | None:
    """Lexicographically smallest perfect matching in a boolean bipartite graph."""
    n = tight.shape[0]
    fixed: list[int] = []
    taken = np.zeros(n, dtype=bool)

    def completable(row0: int, taken_cols: np.ndarray) -> bool:
        # Kuhn's augmenting paths for rows row0..n-1 over the free columns.
        match_col = [-1] * n
        for r in range(row0, n):
            seen = taken_cols.copy()
            if not _augment(r, tight, match_col, seen):
                return False
        return True

    for i in range(n):
        for j in np.nonzero(tight[i])[0]:
            if taken[j]:
                continue
            taken[j] = True
            if completable(i + 1, taken):
                fixed.append(int(j))
                break
            taken[j] = False
        else:
            return None
    return fixed


def _augment(r: int, tight: np.ndarray, match_col: list[int], seen: np.ndarray) -> bool:
    for j in np.nonzero(tight[r])[0]:
        if seen[j]:
            continue
        seen[j] = True
        if match_col[j] == -1 or _augment(match_col[j], tight, match_col, seen):
            match_col[j] = r
            return True
    return False


def solve(cost: np.ndarray) -> list[int]:
    """Optimal row->column permutation for a square cost matrix.

    Among equal-cost optima the lexicographically smallest permutation
    (by row, then column) is returned.
    """
    c = np.asarray(cost, dtype=float)
    n = c.shape[0]
    if n == 0:
        return []
    row_to_col, u, v = _solve_square(c)
    best = math.fsum(c[i, row_to_col[i]] for i in range(n))
    scale = max(1.0, float(np.abs(c).max()))
    reduced = c - u[:, None] - v[None, :]
    tight = reduced <= 1e-9 * scale
    lex = _lexicographic_tight_matching(tight)
    if lex is not None and math.fsum(c[i, lex[i]] for i in range(n)) <= best:
        return lex
    return row_to_col


def hungarian(cost, sentinel: float = SENTINEL) -> Assignment:
    """Minimum-cost one-to-one assignment of rows (tracks) to columns (detections).

    Rectangular inputs are zero-padded to square.  Pairs whose cost is at
    or above ``sentinel`` are reported as unmatched.
    """
    c = np.asarray(cost, dtype=float)
    if c.size == 0:
        n_rows = c.shape[0] if c.ndim == 2 else 0
        n_cols = c.shape[1] if c.ndim == 2 else 0
        return Assignment([], list(range(n_rows)), list(range(n_cols)))
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = c.shape
    n = max(n_rows, n_cols)
    padded = np.zeros((n, n))
    padded[:n_rows, :n_cols] = c
    perm = solve(padded)

    matches = []
    matched_rows, matched_cols = set(), set()
    for i, j in enumerate(perm):
        if i < n_rows and j < n_cols and c[i, j] < sentinel:
            matches.append((i, j))
            matched_rows.add(i)
            matched_cols.add(j)
    return Assignment(
        matches=matches,
        unmatched_tracks=[i for i in range(n_rows) if i not in matched_rows],
        unmatched_detections=[j for j in range(n_cols) if j not in matched_cols],
    )


def assignment_cost(cost, matches) -> float:
    c = np.asarray(cost, dtype=float)
    return math.fsum(c[i, j] for i, j in matches)
