"""N-way one-shot evaluation: score matrices, argmax and bijective assignment."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DimensionError


@dataclass
class Episode:
    supports: list
    queries: list
    truth: list  # truth[q] = support index

    def __post_init__(self):
        n = len(self.supports)
        if len(self.queries) != n or len(self.truth) != n:
            raise ContractError("an episode needs as many queries and truth entries as supports")
        if sorted(self.truth) != list(range(n)):
            raise ContractError("truth must map queries one-to-one onto supports")
        classes = [getattr(s, "class_id", -1) for s in self.supports]
        known = [c for c in classes if c >= 0]
        if len(set(known)) != len(known):
            raise ContractError("support classes must be pairwise distinct")

    @property
    def n(self):
        return len(self.supports)


def score_episode(model, episode: Episode) -> np.ndarray:
    """``s[q, p]`` = match probability of query ``q`` against support ``p``."""
    s = np.asarray(model.score_matrix(episode.queries, episode.supports), dtype=np.float64)
    if s.shape != (episode.n, episode.n):
        raise DimensionError(f"scorer returned {s.shape}, expected {(episode.n, episode.n)}")
    return s


def assign_argmax(scores) -> np.ndarray:
    """Best support per query; ties go to the lowest support index."""
    s = np.asarray(scores)
    return np.argmax(s, axis=1)


# ---------------------------------------------------------------------------
# Hungarian method


def hungarian_min(cost) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-cost perfect assignment of rows to columns via shortest augmenting paths.

    Returns ``(col_of_row, u, v)`` where ``u``/``v`` are dual potentials with
    ``cost[i, j] - u[i] - v[j] >= 0`` and equality on assigned pairs.
    """
    c = np.asarray(cost, dtype=np.float64)
    n = c.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j] = row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _has_perfect_matching(adj, rows, cols):
    """Kuhn's augmenting-path test on the sub-graph ``rows x cols``."""
    match = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def assign_hungarian(scores, tol: float | None = None) -> np.ndarray:
    """Bijective query -> support assignment maximising the summed score.

    Among optimal assignments the lexicographically smallest permutation is
    returned: optimal assignments are exactly the perfect matchings on the
    tight (zero reduced cost) edges, searched greedily row by row.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"assignment needs a square matrix, got {s.shape}")
    n = s.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    cost = -s
    perm, u, v = hungarian_min(cost)
    if tol is None:
        tol = 1e-10 * n * (1.0 + float(np.abs(cost).max()))
    tight = (cost - u[:, None] - v[None, :]) <= tol
    adj = [list(np.flatnonzero(tight[i])) for i in range(n)]
    if all(len(a) == 1 for a in adj):
        return perm
    out = np.empty(n, dtype=int)
    free_cols = set(range(n))
    for i in range(n):
        for j in adj[i]:
            if j not in free_cols:
                continue
            rest = free_cols - {j}
            if _has_perfect_matching(adj, range(i + 1, n), rest):
                out[i] = j
                free_cols = rest
                break
        else:  # numerical corner: fall back to the solver's own optimum
            return perm
    return out


def assignment_total(scores, assignment) -> float:
    """Sum of ``scores[q, assignment[q]]`` accumulated in row order."""
    s = np.asarray(scores, dtype=np.float64)
    total = 0.0
    for q, p in enumerate(assignment):
        total += float(s[q, p])
    return total


def episode_accuracy(assignment, truth) -> float:
    a = np.asarray(assignment)
    t = np.asarray(truth)
    if a.shape != t.shape:
        raise ContractError("assignment must cover every query")
    return float(np.mean(a == t)) if len(t) else 0.0


# ---------------------------------------------------------------------------
# predefined runs


@dataclass
class RunResult:
    run: int
    mode: str
    accuracy: float
    scores: np.ndarray
    assignment: np.ndarray


@dataclass
class EvaluationReport:
    mode: str
    runs: list

    @property
    def mean(self):
        """Accuracy over all query decisions (runs weighted by size)."""
        correct = sum(r.accuracy * len(r.assignment) for r in self.runs)
        total = sum(len(r.assignment) for r in self.runs)
        return correct / total if total else 0.0


def evaluate_runs(model, runs, mode: str = "argmax") -> EvaluationReport:
    """Score every predefined run and assign with argmax or the Hungarian method."""
    if mode not in ("argmax", "full-context"):
        raise ContractError(f"mode must be 'argmax' or 'full-context', not {mode!r}")
    assign = assign_argmax if mode == "argmax" else assign_hungarian
    results = []
    for run in runs:
        ep = Episode(run.supports, run.queries, run.truth)
        s = score_episode(model, ep)
        a = assign(s)
        results.append(RunResult(run.index, mode, episode_accuracy(a, run.truth), s, a))
    return EvaluationReport(mode, results)


def write_results(path, reports) -> Path:
    """Tab-separated rows ``run, mode, accuracy`` plus one ``mean`` row per mode."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["run", "mode", "accuracy"])
        for rep in reports:
            for r in rep.runs:
                w.writerow([f"{r.run:02d}", rep.mode, f"{r.accuracy:.6f}"])
            w.writerow(["mean", rep.mode, f"{rep.mean:.6f}"])
    return path


def dump_matrix(path, scores) -> Path:
    """Plain-text N x N grid, one row per query."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(scores, dtype=np.float64), fmt="%.17g")
    return path


def load_matrix(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, dtype=np.float64))
