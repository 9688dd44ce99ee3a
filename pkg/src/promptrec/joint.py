"""Intra-entry score aggregation and inter-entry distinct-proposal assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import NonFiniteWeight


@dataclass(frozen=True, eq=False)
class EntryScoreVector:
    entry_id: str
    scores: np.ndarray

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("entry scores must be a non-empty vector")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True)
class Assignment:
    """Entry -> proposal index. Only non-fallback entries are guaranteed distinct."""

    pairs: dict[Hashable, int]
    fallback_entries: frozenset = frozenset()
    total: float = 0.0
    methods: dict[Hashable, str] = field(default_factory=dict)


def aggregate_entry(matrix: np.ndarray, entry_id: str = "", mode: str = "mean") -> EntryScoreVector:
    """Collapse a (description, proposal) matrix to one vector shared by the whole entry."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("expected a non-empty (description, proposal) matrix")
    if mode == "mean":
        return EntryScoreVector(entry_id, m.mean(axis=0))
    if mode == "sum":
        return EntryScoreVector(entry_id, m.sum(axis=0))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def _solve_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path assignment for ``rows <= cols``.

    Returns ``(col_of_row, u, v)`` with row/column potentials such that
    ``cost[i, j] - u[i] - v[j] >= 0`` with equality on matched pairs.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: 1-based row matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
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
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _solve_fixed(cost: np.ndarray, fixed: dict[int, int]) -> np.ndarray:
    n, m = cost.shape
    rows = [i for i in range(n) if i not in fixed]
    taken = set(fixed.values())
    cols = [j for j in range(m) if j not in taken]
    out = np.full(n, -1, dtype=np.int64)
    for i, j in fixed.items():
        out[i] = j
    if rows:
        sub, _, _ = _solve_min(cost[np.ix_(rows, cols)])
        for r, c in zip(rows, sub):
            out[r] = cols[c]
    return out


def _total(weights: np.ndarray, cols: np.ndarray, n_real: int) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        if j < n_real:
            total += weights[i, j]
    return float(total)


def hungarian_max(weights: np.ndarray) -> Assignment:
    """Maximum-weight assignment of rows (entries) to distinct columns (proposals).

    With more rows than columns the matrix is padded with dummy columns of
    weight ``min - 1``; rows landing there are reported in
    ``fallback_entries`` and left out of ``pairs``. Among optimal solutions
    the lexicographically smallest column sequence is returned.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    bad = np.argwhere(~np.isfinite(w))
    if len(bad):
        raise NonFiniteWeight(tuple(int(i) for i in bad[0]))
    n_rows, n_cols = w.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment({}, frozenset(range(n_rows)), 0.0)

    padded = w
    if n_rows > n_cols:
        dummy = np.full((n_rows, n_rows - n_cols), w.min() - 1.0)
        padded = np.concatenate([w, dummy], axis=1)
    cost = -padded
    cols, u, v = _solve_min(cost)

    # Lexicographic canonicalisation. A pair can only appear in some optimal
    # solution if its reduced cost under the optimal potentials is zero.
    scale = 1.0 + float(np.abs(padded).max())
    tol = 1e-9 * scale * n_rows
    reduced = cost - u[:, None] - v[None, :]
    best = _total(padded, cols, padded.shape[1])
    fixed: dict[int, int] = {}
    for i in range(n_rows):
        taken = set(fixed.values())
        for j in range(int(cols[i])):
            if j in taken or reduced[i, j] > tol:
                continue
            trial = _solve_fixed(cost, {**fixed, i: j})
            if _total(padded, trial, padded.shape[1]) >= best - tol:
                cols = trial
                break
        fixed[i] = int(cols[i])

    pairs = {i: int(j) for i, j in enumerate(cols) if j < n_cols}
    fallback = frozenset(i for i, j in enumerate(cols) if j >= n_cols)
    return Assignment(pairs, fallback, _total(w, cols, n_cols),
                      {i: ("fallback" if i in fallback else "joint") for i in range(n_rows)})


def assign_image(vectors: Sequence[EntryScoreVector], enabled: bool = True,
                 weight: str = "prob") -> Assignment:
    """Pick one proposal per entry of an image.

    Joint mode keeps entries on distinct proposals; entries left without a
    proposal fall back to their own argmax. Disabled, every entry takes its
    argmax independently.
    """
    if not vectors:
        return Assignment({})
    sizes = {v.scores.size for v in vectors}
    if len(sizes) != 1:
        raise ValueError("entry vectors disagree on proposal count")
    ids = [v.entry_id for v in vectors]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate entry ids")
    W = np.stack([v.scores for v in vectors])

    if not enabled:
        pairs = {e: int(np.argmax(W[i])) for i, e in enumerate(ids)}
        return Assignment(pairs, frozenset(), float(sum(W[i, pairs[e]] for i, e in enumerate(ids))),
                          {e: "argmax" for e in ids})

    if weight == "logprob":
        W = np.log(np.maximum(W, np.finfo(np.float64).tiny))
    elif weight != "prob":
        raise ValueError(f"unknown assignment weight {weight!r}")
    result = hungarian_max(W)
    pairs, methods = {}, {}
    for i, e in enumerate(ids):
        if i in result.pairs:
            pairs[e] = result.pairs[i]
            methods[e] = "joint"
        else:
            pairs[e] = int(np.argmax(W[i]))
            methods[e] = "fallback"
    fallback = frozenset(ids[i] for i in result.fallback_entries)
    return Assignment(pairs, fallback, result.total, methods)
