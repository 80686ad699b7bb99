"""Synthetic challenge generator for tests and demos.

Writes a dataset of cases (two kidneys, one tumor, sometimes a cyst, three jittered
delineations per ROI, covariates), one prediction directory per team and a run
configuration. Everything derives from ``seed``.

    python -m segrank.synthetic OUT_DIR [--cases 10] [--teams 4] [--seed 2021]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotations import CaseAnnotation, RoiInstance, majority_aggregate
from .volgrid import CYST, KIDNEY, TUMOR, BinaryMask, LabelVolume, write_mask, write_volume

DIMS = (28, 24, 16)
SPACING = (0.8, 0.8, 1.5)
DEFAULT_SEED = 2021


def _ellipsoid(center, radii, dims=DIMS) -> np.ndarray:
    grid = np.indices(dims, dtype=float)
    r = sum(((grid[a] - center[a]) / radii[a]) ** 2 for a in range(3))
    return r <= 1.0


def _jitter(rng, center, radii, amount):
    c = [x + rng.uniform(-amount, amount) for x in center]
    r = [max(1.0, x + rng.uniform(-amount, amount)) for x in radii]
    return c, r


def make_case(case_id: str, rng: np.random.Generator, n_raters: int = 3,
              identical: bool = False) -> tuple[CaseAnnotation, float]:
    shapes = []
    left = ((7.5, 12.0, 8.0), (4.5, 6.5, 5.0))
    right = ((20.5, 12.0, 8.0), (4.5, 6.5, 5.0))
    shapes.append(("kidney_left", KIDNEY, left))
    shapes.append(("kidney_right", KIDNEY, right))
    side = rng.integers(0, 2)
    kc = (left, right)[side][0]
    tumor_r = float(rng.uniform(1.8, 3.5))
    tumor_c = (kc[0] + (3.5 if side else -3.5), kc[1] + rng.uniform(-3, 3), kc[2] + rng.uniform(-1, 1))
    shapes.append(("tumor_1", TUMOR, (tumor_c, (tumor_r, tumor_r, tumor_r * 0.6))))
    if rng.random() < 0.5:
        oc = (left, right)[1 - side][0]
        shapes.append(("cyst_1", CYST, ((oc[0], oc[1] + 3.0, oc[2]), (1.6, 1.6, 1.2))))
    rois = []
    for instance_id, code, (center, radii) in shapes:
        masks = []
        base = _ellipsoid(center, radii)
        for _ in range(n_raters):
            if identical:
                data = base
            else:
                data = _ellipsoid(*_jitter(rng, center, radii, 0.6))
            masks.append(BinaryMask(data, SPACING))
        rois.append(RoiInstance(instance_id, code, tuple(masks)))
    size_cm = 2 * tumor_r * SPACING[0] / 10.0
    return CaseAnnotation(case_id, DIMS, SPACING, tuple(rois)), size_cm


def _team_prediction(team_idx: int, gt: LabelVolume, rng: np.random.Generator) -> LabelVolume:
    labels = gt.labels.copy()
    if team_idx == 0:
        return gt
    if team_idx == 1:
        tumor = ndimage.binary_dilation(labels == TUMOR)
        labels[tumor & (labels != CYST)] = TUMOR
    elif team_idx == 2:
        labels = np.roll(labels, 1, axis=0)
        tumor = labels == TUMOR
        labels[tumor & ~ndimage.binary_erosion(tumor)] = KIDNEY
    else:
        if rng.random() < 0.4:
            labels[labels == TUMOR] = KIDNEY
        noise = rng.random(labels.shape) < 0.01
        labels[noise & (labels == 0)] = KIDNEY
        labels[(labels == CYST)] = TUMOR if team_idx % 2 else 0
    return LabelVolume(labels, gt.spacing_mm)


def _covariate_rows(n_cases: int, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    while True:
        rows = [(int(rng.integers(0, 2)), i % 2, (i // 2) % 2 if i % 3 else 1 - (i // 2) % 2) for i in range(n_cases)]
        design = np.column_stack([np.array(rows, dtype=float), np.ones(n_cases), rng.random(n_cases)])
        # too few cases for a regression at all: nothing to guarantee
        if n_cases < design.shape[1] or np.linalg.matrix_rank(design) == design.shape[1]:
            return rows


def generate(root, n_cases: int = 10, n_teams: int = 4, seed: int = DEFAULT_SEED,
             identical_delineations: bool = False, incomplete_team: bool = False,
             samples_per_case: int = 10, bootstrap_samples: int = 200) -> Path:
    """Write ``dataset/``, ``predictions/`` and ``config.json`` under ``root``; return the config path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    dataset, preds = root / "dataset", root / "predictions"
    cov_rows = _covariate_rows(n_cases, rng)
    teams = [f"team_{chr(ord('a') + t)}" for t in range(n_teams)]
    for c in range(n_cases):
        case_id = f"case_{c:05d}"
        case, size_cm = make_case(case_id, rng, identical=identical_delineations)
        case_dir = dataset / case_id
        write_volume(LabelVolume.empty(DIMS, SPACING), case_dir / "reference.json")
        rois = []
        for roi in case.rois:
            paths = []
            for r, m in enumerate(roi.delineations):
                name = f"{roi.instance_id}_d{r}.json"
                write_mask(m, case_dir / name)
                paths.append(name)
            rois.append({"instance_id": roi.instance_id, "class": roi.class_code, "delineations": paths})
        clear_cell, female, non_caucasian = cov_rows[c]
        doc = {
            "case_id": case_id,
            "reference": "reference.json",
            "rois": rois,
            "covariates": {"tumor_size_cm": round(size_cm, 4), "clear_cell": clear_cell,
                           "female": female, "non_caucasian": non_caucasian},
        }
        (case_dir / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n")
        gt = majority_aggregate(case)
        for t, team in enumerate(teams):
            write_volume(_team_prediction(t, gt, rng), preds / team / f"{case_id}.json")
    if incomplete_team:
        for c in range(n_cases - 1):
            case_id = f"case_{c:05d}"
            write_volume(majority_aggregate(make_case(case_id, np.random.default_rng(c))[0]),
                         preds / "team_incomplete" / f"{case_id}.json")
    config = {
        "dataset_root": "dataset",
        "predictions_root": "predictions",
        "output_dir": "out",
        "sampling": {"master_seed": seed, "samples_per_case": samples_per_case},
        "surface_dice": {"tolerance_mm": {"kidney_and_masses": 1.0, "masses": 1.0, "tumor": 1.0}},
        "stats": {"bootstrap_samples": bootstrap_samples, "alpha": 0.05, "significance_metric": "tumor_dice"},
        "strata": {"teams": min(5, n_teams)},
        "heatmaps": {"cases": ["case_00000"], "class": "tumor"},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2) + "\n")
    return cfg_path


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="write a synthetic multi-annotator challenge")
    p.add_argument("out_dir")
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--teams", type=int, default=4)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--identical-delineations", action="store_true")
    args = p.parse_args(argv)
    print(generate(args.out_dir, args.cases, args.teams, args.seed, args.identical_delineations))


if __name__ == "__main__":
    main()
