"""Command line entry point: ``segrank <subcommand> --config cfg.json [...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .annotations import SamplingPlan, format_agreement, interannotator_agreement, load_case, sample_composites
from .config import RunConfig, class_code, load_config
from .errors import ConfigError, SegrankError
from .pipeline import (
    cluster_report,
    dataset_fingerprint,
    discover,
    load_covariates,
    load_scores,
    run_evaluation,
    strata_report,
    write_heatmap,
    write_stage_outputs,
)
from .postprocess import PostprocessRules, apply_rules
from .ranking import (
    DEFAULT_BOOTSTRAP_SAMPLES,
    bootstrap_ranking,
    format_bootstrap_json,
    format_leaderboard_csv,
    format_leaderboard_text,
    rank_then_aggregate,
)
from .significance import format_significance_csv, pairwise_significance
from .volgrid import CLASS_NAMES, TUMOR, read_volume, write_volume

log = logging.getLogger("segrank")


def _config(args, required: bool = False) -> RunConfig | None:
    if args.config is None:
        if required:
            raise ConfigError(f"'{args.command}' needs --config")
        return None
    return load_config(args.config).with_overrides(args.seed, args.workers, args.output).validate()


def _out_dir(args, cfg: RunConfig | None) -> Path:
    if args.output is not None:
        return Path(args.output)
    return cfg.output_dir if cfg is not None else Path(".")


def _metrics_path(args, cfg) -> Path:
    return Path(args.metrics) if args.metrics else _out_dir(args, cfg) / "metrics.csv"


def _scores(args, cfg):
    fp = dataset_fingerprint(cfg) if cfg is not None else None
    return load_scores(_metrics_path(args, cfg), fp)


def cmd_run(args) -> int:
    cfg = _config(args, required=True)
    manifest = run_evaluation(cfg, stages="metrics" if args.command == "evaluate" else "all")
    for w in manifest["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    print(f"{len(manifest['teams'])} teams x {len(manifest['cases'])} cases -> {cfg.output_dir}")
    return 0


def cmd_rank(args) -> int:
    cfg = _config(args)
    board = rank_then_aggregate(_scores(args, cfg))
    write_stage_outputs(_out_dir(args, cfg), {"leaderboard.csv": format_leaderboard_csv(board)})
    print(format_leaderboard_text(board))
    return 0


def cmd_bootstrap(args) -> int:
    cfg = _config(args)
    n = args.samples or (cfg.bootstrap_samples if cfg else DEFAULT_BOOTSTRAP_SAMPLES)
    seed = args.seed if args.seed is not None else (cfg.bootstrap_seed if cfg else 0)
    workers = cfg.resolved_workers() if cfg else (args.workers or 1)
    res = bootstrap_ranking(_scores(args, cfg), n, seed, workers)
    write_stage_outputs(_out_dir(args, cfg), {"bootstrap.json": format_bootstrap_json(res)})
    top = res.rank_frequency[:, 0]
    for team, f in zip(res.teams, top):
        print(f"{team}: rank-1 frequency {f:.3f}")
    return 0


def cmd_significance(args) -> int:
    cfg = _config(args)
    alpha = args.alpha if args.alpha is not None else (cfg.alpha if cfg else 0.05)
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    metric = args.metric or (cfg.significance_metric if cfg else "tumor_dice")
    sig = pairwise_significance(_scores(args, cfg), alpha, metric)
    text = format_significance_csv(sig)
    write_stage_outputs(_out_dir(args, cfg), {"significance.csv": text})
    print(text, end="")
    return 0


def cmd_strata(args) -> int:
    cfg = _config(args, required=True)
    if args.teams:
        cfg = replace(cfg, strata_teams=tuple(args.teams.split(",")))
    elif args.top:
        cfg = replace(cfg, strata_teams=int(args.top))
    scores = _scores(args, cfg)
    board = rank_then_aggregate(scores)
    covariates = load_covariates(cfg, sorted({s.case_id for s in scores}))
    text = strata_report(cfg, scores, covariates, board)
    write_stage_outputs(_out_dir(args, cfg), {"strata.csv": text})
    print(text, end="")
    return 0


def cmd_cluster(args) -> int:
    cfg = _config(args)
    newick, tree_json = cluster_report(_scores(args, cfg))
    write_stage_outputs(_out_dir(args, cfg), {"dendrogram.nwk": newick, "cluster.json": tree_json})
    print(newick, end="")
    return 0


def cmd_postprocess(args) -> int:
    cfg = _config(args)
    rules = cfg.postprocess if cfg else PostprocessRules()
    write_volume(apply_rules(read_volume(args.input), rules), args.output_volume)
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args)
    plan = cfg.sampling if cfg else SamplingPlan()
    seed = args.seed if args.seed is not None else plan.master_seed
    k = args.samples_per_case or plan.samples_per_case
    case = load_case(args.case)
    print(json.dumps([list(s) for s in sample_composites(case, SamplingPlan(seed, k))]))
    return 0


def cmd_agreement(args) -> int:
    case = load_case(args.case)
    code = class_code(args.class_name)
    print(f"{case.case_id} {CLASS_NAMES[code]} {format_agreement(interannotator_agreement(case, code))}")
    return 0


def cmd_heatmap(args) -> int:
    cfg = _config(args, required=True)
    code = class_code(args.class_name) if args.class_name else cfg.heatmap_class
    cfg = replace(cfg, heatmap_class=code)
    disc = discover(cfg)
    if args.case_id not in disc.case_ids:
        raise ConfigError(f"case {args.case_id} not in dataset")
    path = _out_dir(args, cfg) / "heatmaps" / f"{args.case_id}_{CLASS_NAMES[code]}.json"
    write_heatmap(cfg, disc.teams, args.case_id, path)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--workers", type=int, help="worker threads (fallback: $SEGRANK_WORKERS)")
    common.add_argument("--output", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="segrank", description=__doc__)
    p.add_argument("--version", action="version", version=f"segrank {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="full pipeline").set_defaults(func=cmd_run)
    sub.add_parser("evaluate", parents=[common], help="metrics.csv for every team and case").set_defaults(func=cmd_run)

    for name, func, helptext in (
        ("rank", cmd_rank, "leaderboard from metrics.csv"),
        ("bootstrap", cmd_bootstrap, "bootstrap ranking stability"),
        ("significance", cmd_significance, "pairwise signed-rank tests with Holm correction"),
        ("strata", cmd_strata, "regression of tumor Dice on case covariates"),
        ("cluster", cmd_cluster, "average-linkage dendrogram of cases"),
    ):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--metrics", help="metrics CSV (default: <output>/metrics.csv)")
        sp.set_defaults(func=func)
        if name == "bootstrap":
            sp.add_argument("--samples", type=int, help="number of bootstrap samples")
        if name == "significance":
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--metric", choices=("tumor_dice", "mean_dice", "mean_surface_dice"))
        if name == "strata":
            sp.add_argument("--teams", help="comma-separated team subset")
            sp.add_argument("--top", type=int, help="use the top-N leaderboard teams")

    sp = sub.add_parser("postprocess", parents=[common], help="connected-component cleanup of one volume")
    sp.add_argument("input")
    sp.add_argument("output_volume")
    sp.set_defaults(func=cmd_postprocess)

    sp = sub.add_parser("sample", parents=[common], help="composite selectors drawn for a case")
    sp.add_argument("--case", required=True, help="case manifest")
    sp.add_argument("-K", "--samples-per-case", type=int)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("agreement", parents=[common], help="inter-annotator Dice for a case")
    sp.add_argument("--case", required=True, help="case manifest")
    sp.add_argument("--class", dest="class_name", default=CLASS_NAMES[TUMOR])
    sp.set_defaults(func=cmd_agreement)

    sp = sub.add_parser("heatmap", parents=[common], help="per-voxel team tally for one case")
    sp.add_argument("--case-id", required=True)
    sp.add_argument("--class", dest="class_name")
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SegrankError as exc:
        print(f"segrank: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"segrank: internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
