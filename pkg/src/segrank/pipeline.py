"""End-to-end evaluation: discovery, per-case scoring, ranking, statistics and reports.

Every artifact is a pure function of the configuration and the input bytes. Work is
spread over a thread pool one case at a time; results are reassembled in sorted
order before anything is written.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .annotations import CaseCovariates, interannotator_agreement, load_case, sample_composites
from .config import RunConfig
from .errors import ConfigError, DataError, SingularDesignError, StaleIntermediateError
from .metrics import evaluate_prepared, format_metrics_csv, parse_metrics_csv, prepare_case
from .postprocess import apply_rules
from .ranking import (
    ScoreTable,
    aggregate_scores,
    bootstrap_ranking,
    format_bootstrap_json,
    format_leaderboard_csv,
    format_scores_csv,
    rank_then_aggregate,
)
from .significance import MIN_CASES, format_significance_csv, pairwise_significance
from .strata import cluster_cases, format_strata_csv, prediction_heatmap, regress_on_covariates
from .volgrid import CLASS_NAMES, read_volume, write_count_volume

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
RUN_MANIFEST = "run_manifest.json"
INCOMPLETE_MARKER = "RUN_INCOMPLETE"


@dataclass
class Discovery:
    cases: list[tuple[str, Path]]  # (case_id, manifest path), sorted by case id
    teams: list[str]
    excluded: dict = field(default_factory=dict)  # team -> reason
    warnings: list[str] = field(default_factory=list)

    @property
    def case_ids(self) -> list[str]:
        return [c for c, _ in self.cases]


def prediction_path(cfg: RunConfig, team: str, case_id: str) -> Path:
    return cfg.predictions_root / team / f"{case_id}.json"


def discover(cfg: RunConfig) -> Discovery:
    """Cases are every ``manifest.json`` below the dataset root; a team is a
    subdirectory of the predictions root holding ``<case_id>.json`` for every case."""
    cases = {}
    for path in sorted(cfg.dataset_root.rglob(MANIFEST_NAME)):
        try:
            case_id = str(json.loads(path.read_text(encoding="utf-8"))["case_id"])
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"bad case manifest {path}: {exc}") from exc
        if case_id in cases:
            raise DataError(f"case id {case_id} declared by both {cases[case_id]} and {path}")
        cases[case_id] = path
    if not cases:
        raise ConfigError(f"no case manifests ({MANIFEST_NAME}) under {cfg.dataset_root}")
    case_ids = sorted(cases)
    warnings, excluded, teams = [], {}, []
    for d in sorted(p for p in cfg.predictions_root.iterdir() if p.is_dir()):
        team = d.name
        if cfg.teams_include and team not in cfg.teams_include:
            continue
        if team in cfg.teams_exclude:
            continue
        missing = [c for c in case_ids if not prediction_path(cfg, team, c).is_file()]
        if missing:
            reason = f"missing {len(missing)} of {len(case_ids)} cases: {', '.join(missing)}"
            excluded[team] = reason
            warnings.append(f"team {team} excluded, {reason}")
            log.warning("team %s excluded, %s", team, reason)
        else:
            teams.append(team)
    if not teams:
        raise ConfigError(f"no team under {cfg.predictions_root} has a complete submission")
    return Discovery([(c, cases[c]) for c in case_ids], teams, excluded, warnings)


def fingerprint(paths, root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(Path(p).relative_to(root)).encode())
        h.update(b"\0")
        h.update(hashlib.sha256(Path(p).read_bytes()).digest())
    return h.hexdigest()


def dataset_fingerprint(cfg: RunConfig) -> str:
    return fingerprint([p for p in cfg.dataset_root.rglob("*") if p.is_file()], cfg.dataset_root)


def predictions_fingerprint(cfg: RunConfig, teams) -> str:
    files = [p for t in teams for p in (cfg.predictions_root / t).rglob("*") if p.is_file()]
    return fingerprint(files, cfg.predictions_root)


@dataclass
class CaseResult:
    case_id: str
    selectors: list
    records: list
    covariates: object
    agreement: dict


def _evaluate_one_case(cfg: RunConfig, case_id: str, manifest: Path, teams) -> CaseResult:
    case = load_case(manifest)
    if case.case_id != case_id:
        raise DataError(f"{manifest}: case id changed during the run")
    selectors = sample_composites(case, cfg.sampling)
    prepared = prepare_case(case, selectors)
    records = []
    for team in teams:
        try:
            pred = read_volume(prediction_path(cfg, team, case_id))
        except DataError as exc:
            raise DataError(f"team {team}, case {case_id}: {exc}") from exc
        if cfg.postprocess_enabled:
            pred = apply_rules(pred, cfg.postprocess)
        records.extend(evaluate_prepared(pred, prepared, cfg.surface_dice, team_id=team))
    agreement = {}
    if case.n_raters >= 2:
        for code in sorted({roi.class_code for roi in case.rois}):
            agreement[code] = interannotator_agreement(case, code)
    return CaseResult(case_id, selectors, records, case.covariates, agreement)


def evaluate_cases(cfg: RunConfig, disc: Discovery, workers: int) -> list[CaseResult]:
    def work(item):
        return _evaluate_one_case(cfg, item[0], item[1], disc.teams)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, disc.cases))
    else:
        results = [work(item) for item in disc.cases]
    return sorted(results, key=lambda r: r.case_id)


class StagedOutput:
    """Writes artifacts into a scratch directory and moves them under their final
    names only on commit. A marker file flags the output directory while a run is
    in progress and is left behind if it fails."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data: str | bytes) -> None:
        self.files[name] = data.encode() if isinstance(data, str) else data

    def add_tree(self, name: str, src: Path) -> None:
        for p in sorted(src.rglob("*")):
            if p.is_file():
                self.add(f"{name}/{p.relative_to(src).as_posix()}", p.read_bytes())

    def __enter__(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / INCOMPLETE_MARKER).write_text("run in progress or failed\n")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        tmp = Path(tempfile.mkdtemp(prefix=".segrank-", dir=self.out_dir))
        try:
            for name, data in self.files.items():
                target = tmp / name
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
            for name in self.files:
                final = self.out_dir / name
                final.parent.mkdir(parents=True, exist_ok=True)
                (tmp / name).replace(final)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
        (self.out_dir / INCOMPLETE_MARKER).unlink(missing_ok=True)
        return False


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def strata_team_subset(cfg: RunConfig, board) -> list[str]:
    if isinstance(cfg.strata_teams, int):
        return [r.team_id for r in sorted(board, key=lambda r: r.final_rank)[: cfg.strata_teams]]
    known = {r.team_id for r in board}
    unknown = [t for t in cfg.strata_teams if t not in known]
    if unknown:
        raise ConfigError(f"strata teams not on the leaderboard: {unknown}")
    return list(cfg.strata_teams)


def strata_report(cfg: RunConfig, scores, covariates: dict, board) -> str:
    subset = strata_team_subset(cfg, board)
    table = ScoreTable.from_scores(scores)
    rows = [table.teams.index(t) for t in subset]
    y = dict(zip(table.cases, table.tumor_dice[rows].mean(axis=0)))
    res = regress_on_covariates(y, covariates)
    return format_strata_csv(res, cfg.alpha)


def cluster_report(scores) -> tuple[str, str]:
    table = ScoreTable.from_scores(scores)
    tree = cluster_cases(list(table.cases), table.tumor_dice.T)
    return tree.newick() + "\n", json.dumps(tree.to_json_dict(), indent=1) + "\n"


def _agreement_csv(results: list[CaseResult]) -> str:
    lines = ["case_id,class,agreement"]
    for r in results:
        for code, value in sorted(r.agreement.items()):
            lines.append(f"{r.case_id},{CLASS_NAMES[code]},{'absent' if value is None else f'{value:.6f}'}")
    return "\n".join(lines) + "\n"


def run_evaluation(cfg: RunConfig, stages: str = "all") -> dict:
    """Run the pipeline and write its artifacts into ``cfg.output_dir``.

    ``stages="metrics"`` stops after metrics.csv / scores.csv. Returns the run
    manifest as written.
    """
    cfg.validate()
    workers = cfg.resolved_workers()
    started = _now()
    with StagedOutput(cfg.output_dir) as out:
        disc = discover(cfg)
        results = evaluate_cases(cfg, disc, workers)
        metrics_text = format_metrics_csv(rec for r in results for rec in r.records)
        # downstream stages read the rounded CSV, exactly as the stand-alone subcommands do
        scores = aggregate_scores(parse_metrics_csv(metrics_text))
        warnings = list(disc.warnings)
        out.add("metrics.csv", metrics_text)
        out.add("scores.csv", format_scores_csv(scores))
        out.add("samples.json", json.dumps(
            {r.case_id: [list(s) for s in r.selectors] for r in results}, indent=1) + "\n")
        out.add("agreement.csv", _agreement_csv(results))
        if stages == "all":
            board = rank_then_aggregate(scores)
            out.add("leaderboard.csv", format_leaderboard_csv(board))
            boot = bootstrap_ranking(scores, cfg.bootstrap_samples, cfg.bootstrap_seed, workers)
            out.add("bootstrap.json", format_bootstrap_json(boot))
            if len(disc.teams) >= 2 and len(disc.cases) >= MIN_CASES:
                sig = pairwise_significance(scores, cfg.alpha, cfg.significance_metric)
                out.add("significance.csv", format_significance_csv(sig))
            else:
                warnings.append(f"significance skipped: needs >= 2 teams and >= {MIN_CASES} cases")
            covariates = {r.case_id: r.covariates for r in results}
            if all(c is not None for c in covariates.values()):
                try:
                    out.add("strata.csv", strata_report(cfg, scores, covariates, board))
                except (SingularDesignError, DataError) as exc:
                    warnings.append(f"strata regression skipped: {exc}")
            newick, tree_json = cluster_report(scores)
            out.add("dendrogram.nwk", newick)
            out.add("cluster.json", tree_json)
            for case_id in cfg.heatmap_cases:
                if case_id not in disc.case_ids:
                    raise ConfigError(f"heatmap case {case_id} not in dataset")
                with tempfile.TemporaryDirectory() as tmp:
                    write_heatmap(cfg, disc.teams, case_id, Path(tmp) / f"{case_id}_{CLASS_NAMES[cfg.heatmap_class]}.json")
                    out.add_tree("heatmaps", Path(tmp))
        manifest = {
            "tool": "segrank",
            "version": __version__,
            "config": cfg.to_dict(),
            "master_seed": cfg.sampling.master_seed,
            "dataset_fingerprint": dataset_fingerprint(cfg),
            "predictions_fingerprint": predictions_fingerprint(cfg, disc.teams),
            "cases": disc.case_ids,
            "teams": disc.teams,
            "excluded_teams": disc.excluded,
            "warnings": warnings,
            "outputs": {name: _sha(data) for name, data in sorted(out.files.items())},
            "started_at": started,
            "finished_at": _now(),
        }
        out.add(RUN_MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return manifest


def write_heatmap(cfg: RunConfig, teams, case_id: str, path: Path) -> Path:
    preds = [read_volume(prediction_path(cfg, t, case_id)) for t in teams]
    if cfg.postprocess_enabled:
        preds = [apply_rules(p, cfg.postprocess) for p in preds]
    heat = prediction_heatmap(preds, cfg.heatmap_class)
    write_count_volume(heat.counts, heat.spacing_mm, path)
    return path


def load_intermediate(path: Path, dataset_fp: str | None = None) -> bytes:
    """Read a saved artifact, refusing it when a sibling run manifest records a
    different hash (or was built from a different dataset)."""
    path = Path(path)
    if not path.is_file():
        raise StaleIntermediateError(f"missing intermediate {path}; run the earlier stage first")
    data = path.read_bytes()
    manifest_path = path.parent / RUN_MANIFEST
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        recorded = manifest.get("outputs", {}).get(path.name)
        if recorded is not None and recorded != _sha(data):
            raise StaleIntermediateError(f"{path} does not match the hash recorded in {manifest_path}")
        if dataset_fp is not None and manifest.get("dataset_fingerprint") not in (None, dataset_fp):
            raise StaleIntermediateError(f"{path} was produced from a different dataset")
    return data


def load_scores(metrics_path: Path, dataset_fp: str | None = None):
    records = parse_metrics_csv(load_intermediate(metrics_path, dataset_fp).decode())
    return aggregate_scores(records)


def write_stage_outputs(out_dir: Path, files: dict) -> None:
    """Write the artifacts of a single stage and refresh their hashes in the run manifest."""
    out_dir = Path(out_dir)
    with StagedOutput(out_dir) as out:
        for name, data in files.items():
            out.add(name, data)
        manifest_path = out_dir / RUN_MANIFEST
        if manifest_path.is_file():
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            outputs = manifest.setdefault("outputs", {})
            for name, data in out.files.items():
                outputs[name] = _sha(data)
            manifest["outputs"] = dict(sorted(outputs.items()))
            out.add(RUN_MANIFEST, json.dumps(manifest, indent=2) + "\n")


def load_covariates(cfg: RunConfig, case_ids) -> dict:
    found = {}
    for path in sorted(cfg.dataset_root.rglob(MANIFEST_NAME)):
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("covariates"):
            found[str(doc["case_id"])] = CaseCovariates.from_dict(doc["covariates"])
    missing = [c for c in case_ids if c not in found]
    if missing:
        raise DataError(f"no covariates for cases {missing}")
    return {c: found[c] for c in case_ids}
