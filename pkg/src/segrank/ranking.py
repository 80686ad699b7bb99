"""Leaderboard construction and bootstrap stability of the final ranking."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import CompletenessError, DataError
from .metrics import HECS, HecId, MetricRecord

DEFAULT_BOOTSTRAP_SAMPLES = 1000


@dataclass(frozen=True)
class TeamCaseScore:
    team_id: str
    case_id: str
    mean_dice: float
    mean_surface_dice: float
    tumor_dice: float


@dataclass(frozen=True)
class LeaderboardRow:
    team_id: str
    agg_dice: float
    agg_surface_dice: float
    rank_dice: float
    rank_surface_dice: float
    mean_rank: float
    final_rank: int
    tiebreak_tumor_dice: float


def aggregate_scores(records: Iterable[MetricRecord]) -> list[TeamCaseScore]:
    """Per (team, case): mean over composites of the mean over HECs, per metric.

    Raises CompletenessError when some team lacks a case another team has, or a
    composite lacks one of the three HECs.
    """
    cells: dict = defaultdict(lambda: defaultdict(dict))
    for r in records:
        slot = cells[(r.team_id, r.case_id)][r.composite_idx]
        if r.hec in slot:
            raise DataError(f"duplicate record for {r.team_id}/{r.case_id}/{r.composite_idx}/{r.hec.value}")
        slot[r.hec] = (r.dice, r.surface_dice)
    if not cells:
        raise CompletenessError("no metric records")
    teams = sorted({t for t, _ in cells})
    cases = sorted({c for _, c in cells})
    gaps = [f"{t}/{c}" for t in teams for c in cases if (t, c) not in cells]
    if gaps:
        raise CompletenessError(f"missing (team, case) records: {', '.join(gaps)}")
    out = []
    for t in teams:
        for c in cases:
            comps = cells[(t, c)]
            per_d, per_sd, per_tumor = [], [], []
            for idx in sorted(comps):
                slot = comps[idx]
                if len(slot) != len(HECS):
                    raise CompletenessError(f"{t}/{c} composite {idx} lacks some HECs")
                per_d.append(np.mean([slot[h][0] for h in HECS]))
                per_sd.append(np.mean([slot[h][1] for h in HECS]))
                per_tumor.append(slot[HecId.TUMOR][0])
            out.append(TeamCaseScore(t, c, float(np.mean(per_d)), float(np.mean(per_sd)), float(np.mean(per_tumor))))
    return out


@dataclass(frozen=True)
class ScoreTable:
    """Team x case matrices of the per-case scores (rows and columns sorted)."""

    teams: tuple[str, ...]
    cases: tuple[str, ...]
    dice: np.ndarray
    surface_dice: np.ndarray
    tumor_dice: np.ndarray

    @classmethod
    def from_scores(cls, scores: Iterable[TeamCaseScore]) -> "ScoreTable":
        scores = list(scores)
        if not scores:
            raise DataError("no team-case scores")
        teams = tuple(sorted({s.team_id for s in scores}))
        cases = tuple(sorted({s.case_id for s in scores}))
        ti = {t: i for i, t in enumerate(teams)}
        ci = {c: i for i, c in enumerate(cases)}
        mats = [np.full((len(teams), len(cases)), np.nan) for _ in range(3)]
        for s in scores:
            i, j = ti[s.team_id], ci[s.case_id]
            mats[0][i, j], mats[1][i, j], mats[2][i, j] = s.mean_dice, s.mean_surface_dice, s.tumor_dice
        if np.isnan(mats[0]).any():
            missing = [f"{teams[i]}/{cases[j]}" for i, j in np.argwhere(np.isnan(mats[0]))]
            raise CompletenessError(f"missing (team, case) scores: {', '.join(missing)}")
        return cls(teams, cases, *mats)


# Aggregates are compared at this many decimals so that equal scores reached by
# different summation orders still tie.
TIE_DECIMALS = 12


def _order(teams, agg_d, agg_sd, tumor):
    agg_d, agg_sd, tumor = (np.round(np.asarray(a, dtype=float), TIE_DECIMALS) for a in (agg_d, agg_sd, tumor))
    rank_d = rankdata(-agg_d, method="average")
    rank_sd = rankdata(-agg_sd, method="average")
    mean_rank = (rank_d + rank_sd) / 2.0
    order = sorted(range(len(teams)), key=lambda i: (mean_rank[i], -tumor[i], teams[i]))
    return rank_d, rank_sd, mean_rank, order


def _leaderboard(teams: Sequence[str], agg_d: np.ndarray, agg_sd: np.ndarray,
                 tumor: np.ndarray) -> list[LeaderboardRow]:
    rank_d, rank_sd, mean_rank, order = _order(teams, agg_d, agg_sd, tumor)
    return [
        LeaderboardRow(teams[i], float(agg_d[i]), float(agg_sd[i]), float(rank_d[i]), float(rank_sd[i]),
                       float(mean_rank[i]), pos, float(tumor[i]))
        for pos, i in enumerate(order, start=1)
    ]


def _final_positions(teams, agg_d, agg_sd, tumor) -> np.ndarray:
    order = _order(teams, agg_d, agg_sd, tumor)[3]
    pos = np.empty(len(teams), dtype=int)
    pos[order] = np.arange(1, len(teams) + 1)
    return pos


def rank_then_aggregate(scores: Iterable[TeamCaseScore]) -> list[LeaderboardRow]:
    """Average per-case scores per team, rank each metric (average ranks for exact
    ties), order by mean rank, then by mean tumor Dice (descending), then team id."""
    table = ScoreTable.from_scores(scores)
    return _leaderboard(table.teams, table.dice.mean(axis=1), table.surface_dice.mean(axis=1),
                        table.tumor_dice.mean(axis=1))


@dataclass(frozen=True)
class BootstrapResult:
    n_samples: int
    seed: int
    teams: tuple[str, ...]  # original leaderboard order
    rank_frequency: np.ndarray  # (T, T): team x final rank
    agg_dice: np.ndarray  # (B, T)
    agg_surface_dice: np.ndarray  # (B, T)
    final_rank: np.ndarray  # (B, T)

    def to_json_dict(self) -> dict:
        r6 = lambda a: [[round(float(x), 6) for x in row] for row in a]  # noqa: E731
        return {
            "n_samples": self.n_samples,
            "seed": self.seed,
            "resampling_unit": "case",
            "teams": list(self.teams),
            "rank_frequency": r6(self.rank_frequency),
            "samples": [
                {
                    "agg_dice": [round(float(x), 6) for x in self.agg_dice[b]],
                    "agg_surface_dice": [round(float(x), 6) for x in self.agg_surface_dice[b]],
                    "final_rank": [int(x) for x in self.final_rank[b]],
                }
                for b in range(self.n_samples)
            ],
        }


def bootstrap_ranking(scores: Iterable[TeamCaseScore], n_samples: int = DEFAULT_BOOTSTRAP_SAMPLES,
                      seed: int = 0, workers: int = 1) -> BootstrapResult:
    """Resample cases with replacement (one resample shared by all teams) and re-rank.

    Resample indices are drawn up front, so the result does not depend on ``workers``.
    """
    if n_samples < 1:
        raise ValueError("bootstrap needs at least one sample")
    table = ScoreTable.from_scores(scores)
    board = _leaderboard(table.teams, table.dice.mean(axis=1), table.surface_dice.mean(axis=1),
                         table.tumor_dice.mean(axis=1))
    order = [table.teams.index(r.team_id) for r in board]
    dice_m, sd_m, tumor_m = table.dice[order], table.surface_dice[order], table.tumor_dice[order]
    teams = tuple(table.teams[i] for i in order)
    n_cases = len(table.cases)
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n_cases, size=(n_samples, n_cases))

    def one(idx):
        d = dice_m[:, idx].mean(axis=1)
        sd = sd_m[:, idx].mean(axis=1)
        tu = tumor_m[:, idx].mean(axis=1)
        return d, sd, _final_positions(teams, d, sd, tu)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, draws))
    else:
        results = [one(idx) for idx in draws]
    agg_d = np.array([r[0] for r in results])
    agg_sd = np.array([r[1] for r in results])
    ranks = np.array([r[2] for r in results])
    t = len(teams)
    freq = np.zeros((t, t))
    for b in range(n_samples):
        freq[np.arange(t), ranks[b] - 1] += 1
    freq /= n_samples
    return BootstrapResult(n_samples, seed, teams, freq, agg_d, agg_sd, ranks)


LEADERBOARD_COLUMNS = ["final_rank", "team_id", "agg_dice", "agg_surface_dice", "rank_dice",
                       "rank_surface_dice", "mean_rank", "tiebreak_tumor_dice"]
SCORE_COLUMNS = ["team_id", "case_id", "mean_dice", "mean_surface_dice", "tumor_dice"]


def format_leaderboard_csv(rows: Sequence[LeaderboardRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEADERBOARD_COLUMNS)
    for r in sorted(rows, key=lambda r: r.final_rank):
        w.writerow([r.final_rank, r.team_id, f"{r.agg_dice:.6f}", f"{r.agg_surface_dice:.6f}",
                    f"{r.rank_dice:.6f}", f"{r.rank_surface_dice:.6f}", f"{r.mean_rank:.6f}",
                    f"{r.tiebreak_tumor_dice:.6f}"])
    return buf.getvalue()


def parse_leaderboard_csv(text: str) -> list[LeaderboardRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != LEADERBOARD_COLUMNS:
        raise DataError(f"leaderboard header must be {LEADERBOARD_COLUMNS}")
    return [
        LeaderboardRow(row["team_id"], float(row["agg_dice"]), float(row["agg_surface_dice"]),
                       float(row["rank_dice"]), float(row["rank_surface_dice"]), float(row["mean_rank"]),
                       int(row["final_rank"]), float(row["tiebreak_tumor_dice"]))
        for row in reader
    ]


def format_leaderboard_text(rows: Sequence[LeaderboardRow], digits: int = 3) -> str:
    lines = [f"{'rank':>4}  {'team':<24} {'dice':>8} {'surf.dice':>9}"]
    for r in sorted(rows, key=lambda r: r.final_rank):
        lines.append(f"{r.final_rank:>4}  {r.team_id:<24} {r.agg_dice:>8.{digits}f} {r.agg_surface_dice:>9.{digits}f}")
    return "\n".join(lines)


def format_scores_csv(scores: Iterable[TeamCaseScore]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for s in sorted(scores, key=lambda s: (s.team_id, s.case_id)):
        w.writerow([s.team_id, s.case_id, f"{s.mean_dice:.6f}", f"{s.mean_surface_dice:.6f}", f"{s.tumor_dice:.6f}"])
    return buf.getvalue()


def format_bootstrap_json(result: BootstrapResult) -> str:
    return json.dumps(result.to_json_dict(), indent=1) + "\n"
