"""Run configuration: a JSON document mirroring :class:`RunConfig`."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .annotations import DEFAULT_SAMPLES_PER_CASE, SamplingPlan
from .errors import ConfigError
from .metrics import SurfaceDiceConfig
from .postprocess import DEFAULT_MIN_VOXELS, PostprocessRules
from .ranking import DEFAULT_BOOTSTRAP_SAMPLES
from .significance import METRIC_SELECTORS
from .volgrid import CLASS_CODES, CLASS_NAMES, TUMOR

WORKERS_ENV = "SEGRANK_WORKERS"


def class_code(value) -> int:
    if isinstance(value, str) and value in CLASS_CODES:
        return CLASS_CODES[value]
    try:
        code = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"unknown class {value!r}") from None
    if code not in CLASS_NAMES or code == 0:
        raise ConfigError(f"unknown class {value!r}")
    return code


@dataclass(frozen=True)
class RunConfig:
    dataset_root: Path
    predictions_root: Path
    output_dir: Path
    sampling: SamplingPlan = field(default_factory=SamplingPlan)
    surface_dice: SurfaceDiceConfig = field(default_factory=SurfaceDiceConfig.uniform)
    postprocess_enabled: bool = False
    postprocess: PostprocessRules = field(default_factory=PostprocessRules)
    bootstrap_samples: int = DEFAULT_BOOTSTRAP_SAMPLES
    alpha: float = 0.05
    significance_metric: str = "tumor_dice"
    teams_include: tuple[str, ...] = ()
    teams_exclude: tuple[str, ...] = ()
    strata_teams: tuple[str, ...] | int = 5
    heatmap_cases: tuple[str, ...] = ()
    heatmap_class: int = TUMOR
    workers: int | None = None

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.bootstrap_samples < 1:
            raise ConfigError("bootstrap samples must be >= 1")
        if self.significance_metric not in METRIC_SELECTORS:
            raise ConfigError(f"significance metric must be one of {METRIC_SELECTORS}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if isinstance(self.strata_teams, int) and self.strata_teams < 1:
            raise ConfigError("strata top-N must be >= 1")
        if check_paths:
            for name in ("dataset_root", "predictions_root"):
                if not getattr(self, name).is_dir():
                    raise ConfigError(f"{name} does not exist: {getattr(self, name)}")
        return self

    @property
    def bootstrap_seed(self) -> int:
        return self.sampling.master_seed

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1")
            return n
        return 1

    def with_overrides(self, seed=None, workers=None, output=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, sampling=replace(cfg.sampling, master_seed=int(seed)))
        if workers is not None:
            cfg = replace(cfg, workers=int(workers))
        if output is not None:
            cfg = replace(cfg, output_dir=Path(output).resolve())
        return cfg

    def to_dict(self) -> dict:
        return {
            "dataset_root": str(self.dataset_root),
            "predictions_root": str(self.predictions_root),
            "output_dir": str(self.output_dir),
            "sampling": {"master_seed": self.sampling.master_seed,
                         "samples_per_case": self.sampling.samples_per_case},
            "surface_dice": {"tolerance_mm": self.surface_dice.to_dict()},
            "postprocess": {
                "enabled": self.postprocess_enabled,
                "min_voxels": {CLASS_NAMES[c]: v for c, v in sorted(self.postprocess.min_voxels.items())},
                "require_lesion_kidney_contact": self.postprocess.require_lesion_kidney_contact,
                "connectivity": self.postprocess.connectivity,
            },
            "stats": {"bootstrap_samples": self.bootstrap_samples, "alpha": self.alpha,
                      "significance_metric": self.significance_metric},
            "teams": {"include": list(self.teams_include), "exclude": list(self.teams_exclude)},
            "strata": {"teams": self.strata_teams if isinstance(self.strata_teams, int) else list(self.strata_teams)},
            "heatmaps": {"cases": list(self.heatmap_cases), "class": CLASS_NAMES[self.heatmap_class]},
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        base = Path(base_dir)
        try:
            def path(key, default=None):
                value = doc.get(key, default)
                if value is None:
                    raise ConfigError(f"config lacks '{key}'")
                return (base / value).resolve()

            sampling = doc.get("sampling", {})
            plan = SamplingPlan(int(sampling.get("master_seed", 0)),
                                int(sampling.get("samples_per_case", DEFAULT_SAMPLES_PER_CASE)))
            tol = doc.get("surface_dice", {}).get("tolerance_mm", 1.0)
            sd = SurfaceDiceConfig.uniform(float(tol)) if not isinstance(tol, dict) else SurfaceDiceConfig(tol)
            pp = doc.get("postprocess", {})
            mv = dict(DEFAULT_MIN_VOXELS)
            mv.update({class_code(k): int(v) for k, v in pp.get("min_voxels", {}).items()})
            rules = PostprocessRules(mv, bool(pp.get("require_lesion_kidney_contact", True)),
                                     int(pp.get("connectivity", 26)))
            st = doc.get("stats", {})
            teams = doc.get("teams", {})
            strata = doc.get("strata", {}).get("teams", 5)
            heat = doc.get("heatmaps", {})
            workers = doc.get("workers")
            cfg = cls(
                dataset_root=path("dataset_root"),
                predictions_root=path("predictions_root"),
                output_dir=path("output_dir", "segrank_out"),
                sampling=plan,
                surface_dice=sd,
                postprocess_enabled=bool(pp.get("enabled", False)),
                postprocess=rules,
                bootstrap_samples=int(st.get("bootstrap_samples", DEFAULT_BOOTSTRAP_SAMPLES)),
                alpha=float(st.get("alpha", 0.05)),
                significance_metric=str(st.get("significance_metric", "tumor_dice")),
                teams_include=tuple(teams.get("include", ())),
                teams_exclude=tuple(teams.get("exclude", ())),
                strata_teams=int(strata) if isinstance(strata, int) else tuple(strata),
                heatmap_cases=tuple(heat.get("cases", ())),
                heatmap_class=class_code(heat.get("class", TUMOR)),
                workers=None if workers is None else int(workers),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(doc, path.parent)

