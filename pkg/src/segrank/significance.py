"""Pairwise one-sided Wilcoxon signed-rank tests between teams with Holm step-down
correction over all ordered team pairs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DataError
from .ranking import ScoreTable, TeamCaseScore, rank_then_aggregate

EXACT_MAX_N = 25
MIN_CASES = 6
METRIC_SELECTORS = ("tumor_dice", "mean_dice", "mean_surface_dice")


def signed_rank_exact_sf(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ >= w) under the sign-flip null, for doubled (integer) ranks."""
    counts = np.zeros(int(ranks2.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return float(counts[w2:].sum() / 2.0 ** len(ranks2))


def wilcoxon_greater(x: Sequence[float], y: Sequence[float]) -> float:
    """One-sided paired signed-rank p-value for H1: x tends to exceed y.

    Zero differences are dropped and tied magnitudes get average ranks. The null
    distribution is enumerated exactly for up to 25 non-zero pairs; beyond that a
    normal approximation with tie-corrected variance and continuity correction is used.
    Returns 1.0 when every difference is zero.
    """
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d), method="average")
    w_plus = ranks[d > 0].sum()
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        return min(1.0, signed_rank_exact_sf(ranks2, int(round(2 * w_plus))))
    _, ties = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (ties**3 - ties).sum() / 48.0
    z = (w_plus - mean - 0.5) / np.sqrt(var)
    return float(norm.sf(z))


def holm(pvalues: Sequence[float], alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Holm step-down: (reject flags, adjusted p-values), both in input order."""
    p = np.asarray(pvalues, dtype=float)
    m = len(p)
    order = np.argsort(p, kind="stable")
    reject = np.zeros(m, dtype=bool)
    for step, i in enumerate(order):
        if p[i] <= alpha / (m - step):
            reject[i] = True
        else:
            break
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    return reject, adjusted


@dataclass(frozen=True)
class SignificanceMatrix:
    teams: tuple[str, ...]
    p_values: np.ndarray  # [row, col]: row better than col; NaN on the diagonal
    adjusted: np.ndarray
    reject: np.ndarray
    alpha: float
    metric: str

    def superior(self, a: str, b: str) -> bool:
        return bool(self.reject[self.teams.index(a), self.teams.index(b)])


def pairwise_significance(scores: Iterable[TeamCaseScore], alpha: float = 0.05,
                          metric: str = "tumor_dice") -> SignificanceMatrix:
    if metric not in METRIC_SELECTORS:
        raise ValueError(f"metric must be one of {METRIC_SELECTORS}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    scores = list(scores)
    table = ScoreTable.from_scores(scores)
    if len(table.teams) < 2:
        raise DataError("pairwise significance needs at least two teams")
    if len(table.cases) < MIN_CASES:
        raise DataError(f"pairwise significance needs at least {MIN_CASES} cases, got {len(table.cases)}")
    board = rank_then_aggregate(scores)
    teams = tuple(r.team_id for r in board)
    values = {"tumor_dice": table.tumor_dice, "mean_dice": table.dice,
              "mean_surface_dice": table.surface_dice}[metric]
    rows = {t: values[table.teams.index(t)] for t in teams}
    t = len(teams)
    p = np.full((t, t), np.nan)
    pairs = [(i, j) for i in range(t) for j in range(t) if i != j]
    for i, j in pairs:
        p[i, j] = wilcoxon_greater(rows[teams[i]], rows[teams[j]])
    flat = np.array([p[i, j] for i, j in pairs])
    rej_flat, adj_flat = holm(flat, alpha)
    reject = np.zeros((t, t), dtype=bool)
    adjusted = np.full((t, t), np.nan)
    for (i, j), r, a in zip(pairs, rej_flat, adj_flat):
        reject[i, j] = r
        adjusted[i, j] = a
    return SignificanceMatrix(teams, p, adjusted, reject, alpha, metric)


def format_significance_csv(sig: SignificanceMatrix) -> str:
    """Square matrix; cell (row, col) is ``p/decision`` for "row better than col",
    decision 1 when rejected under Holm at the family-wise level."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["team", *sig.teams])
    for i, a in enumerate(sig.teams):
        cells = []
        for j in range(len(sig.teams)):
            cells.append("" if i == j else f"{sig.p_values[i, j]:.6f}/{int(sig.reject[i, j])}")
        w.writerow([a, *cells])
    return buf.getvalue()


def parse_significance_csv(text: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "team":
        raise DataError("significance CSV must start with a 'team' header cell")
    teams = rows[0][1:]
    t = len(teams)
    p = np.full((t, t), np.nan)
    reject = np.zeros((t, t), dtype=bool)
    if [r[0] for r in rows[1:]] != teams:
        raise DataError("significance CSV rows and columns must list the same teams")
    for i, row in enumerate(rows[1:]):
        for j, cell in enumerate(row[1:]):
            if i == j:
                continue
            pv, dec = cell.split("/")
            p[i, j], reject[i, j] = float(pv), dec == "1"
    return teams, p, reject
