"""Overlap and surface metrics on hierarchical evaluation classes (HECs).

Surfaces are sets of exposed voxel faces. Each face is represented by its center
in millimeters and weighted by its area; the volume border counts as outside.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .annotations import CaseAnnotation, realize_composite
from .errors import DataError
from .volgrid import CYST, KIDNEY, TUMOR, BinaryMask, LabelVolume, require_compatible


class HecId(enum.Enum):
    KIDNEY_AND_MASSES = "kidney_and_masses"
    MASSES = "masses"
    TUMOR = "tumor"

    @property
    def codes(self) -> tuple[int, ...]:
        return _HEC_CODES[self]

    @property
    def order(self) -> int:
        return _HEC_ORDER[self]


_HEC_CODES = {
    HecId.KIDNEY_AND_MASSES: (KIDNEY, TUMOR, CYST),
    HecId.MASSES: (TUMOR, CYST),
    HecId.TUMOR: (TUMOR,),
}
HECS = tuple(HecId)
_HEC_ORDER = {h: i for i, h in enumerate(HECS)}


def hec_mask(v: LabelVolume, h: HecId) -> BinaryMask:
    return v.mask(*h.codes)


def dice_arrays(a: np.ndarray, b: np.ndarray) -> float:
    na = int(np.count_nonzero(a))
    nb = int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    require_compatible(a, b, "masks")
    return dice_arrays(a.data, b.data)


@dataclass(frozen=True)
class SurfaceElementSet:
    points: np.ndarray  # (n, 3) face centers, mm
    areas: np.ndarray  # (n,) face areas, mm^2
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]

    def __len__(self):
        return len(self.areas)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())


def _surface_from_array(data: np.ndarray, spacing) -> SurfaceElementSet:
    spacing = tuple(float(s) for s in spacing)
    padded = np.pad(data, 1, constant_values=False)
    inner = (slice(1, -1),) * 3
    points, areas = [], []
    for axis in range(3):
        face_area = spacing[(axis + 1) % 3] * spacing[(axis + 2) % 3]
        for step, offset in ((-1, 0.0), (1, 1.0)):
            neighbour = np.roll(padded, -step, axis=axis)[inner]
            idx = np.argwhere(data & ~neighbour)
            if not len(idx):
                continue
            pts = (idx + 0.5) * np.asarray(spacing)
            pts[:, axis] = (idx[:, axis] + offset) * spacing[axis]
            points.append(pts)
            areas.append(np.full(len(idx), face_area))
    if points:
        pts = np.concatenate(points)
        ar = np.concatenate(areas)
    else:
        pts = np.empty((0, 3))
        ar = np.empty(0)
    return SurfaceElementSet(pts, ar, tuple(data.shape), spacing)


def extract_surface(m: BinaryMask) -> SurfaceElementSet:
    return _surface_from_array(m.data, m.spacing_mm)


def _exact_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = p - q
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def within_tolerance(points: np.ndarray, tree: cKDTree, tol: float) -> np.ndarray:
    """For each point, whether some tree point lies within ``tol`` (inclusive).

    Nearest-neighbour distances close to ``tol`` are rechecked with an explicit
    distance computation so the boundary decision does not depend on the tree's
    internal arithmetic.
    """
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    if tree.n == 0:
        return np.zeros(len(points), dtype=bool)
    band = 1e-9 * max(tol, 1.0)
    d, _ = tree.query(points, k=1, distance_upper_bound=tol + 2 * band)
    covered = d <= tol
    unsure = np.flatnonzero(np.abs(d - tol) <= band)
    if len(unsure):
        candidates = tree.query_ball_point(points[unsure], r=tol + 2 * band)
        for row, cand in zip(unsure, candidates):
            if cand:
                dist = _exact_dist(tree.data[np.asarray(cand)], points[row])
                covered[row] = bool((dist <= tol).any())
            else:
                covered[row] = False
    return covered


def surface_dice_from_surfaces(sp: SurfaceElementSet, sg: SurfaceElementSet, tol: float,
                               tree_p: cKDTree | None = None, tree_g: cKDTree | None = None) -> float:
    if tol <= 0:
        raise ValueError("surface dice tolerance must be positive")
    if len(sp) == 0 and len(sg) == 0:
        return 1.0
    if len(sp) == 0 or len(sg) == 0:
        return 0.0
    tree_p = tree_p if tree_p is not None else cKDTree(sp.points)
    tree_g = tree_g if tree_g is not None else cKDTree(sg.points)
    p_ok = within_tolerance(sp.points, tree_g, tol)
    g_ok = within_tolerance(sg.points, tree_p, tol)
    num = sp.areas[p_ok].sum() + sg.areas[g_ok].sum()
    return float(num / (sp.areas.sum() + sg.areas.sum()))


def surface_dice(pred: BinaryMask, gt: BinaryMask, tol: float) -> float:
    require_compatible(pred, gt, "masks")
    return surface_dice_from_surfaces(extract_surface(pred), extract_surface(gt), tol)


MEAN_OVER_MISCLASSIFIED = "mean_over_misclassified"
FIXED_CONSTANT = "fixed_constant"


@dataclass(frozen=True)
class SurfaceLossConfig:
    normalizer_mode: str = MEAN_OVER_MISCLASSIFIED
    fixed_c: float = 1.0

    def __post_init__(self):
        if self.normalizer_mode not in (MEAN_OVER_MISCLASSIFIED, FIXED_CONSTANT):
            raise ValueError(f"unknown normalizer mode {self.normalizer_mode!r}")
        if self.normalizer_mode == FIXED_CONSTANT and not self.fixed_c > 0:
            raise ValueError("fixed_c must be positive")


def surface_loss(pred: BinaryMask, gt: BinaryMask, cfg: SurfaceLossConfig = SurfaceLossConfig()) -> float:
    """Sum over FP and FN voxel centers of the distance to the nearest ground-truth
    surface point, divided by C (|FP u FN| or a fixed constant)."""
    require_compatible(pred, gt, "masks")
    sg = extract_surface(gt)
    if len(sg) == 0:
        raise DataError("surface loss undefined: ground truth is empty")
    wrong = np.argwhere(pred.data ^ gt.data)
    if not len(wrong):
        return 0.0
    centers = (wrong + 0.5) * np.asarray(pred.spacing_mm)
    d, _ = cKDTree(sg.points).query(centers, k=1)
    c = len(wrong) if cfg.normalizer_mode == MEAN_OVER_MISCLASSIFIED else cfg.fixed_c
    return float(d.sum() / c)


@dataclass(frozen=True)
class SurfaceDiceConfig:
    tolerance_mm: dict  # HecId -> mm

    def __post_init__(self):
        tol = {HecId(h) if not isinstance(h, HecId) else h: float(v) for h, v in self.tolerance_mm.items()}
        missing = [h.value for h in HECS if h not in tol]
        if missing:
            raise ValueError(f"surface dice tolerance missing for {missing}")
        if any(not v > 0 for v in tol.values()):
            raise ValueError("surface dice tolerances must be positive")
        object.__setattr__(self, "tolerance_mm", tol)

    @classmethod
    def uniform(cls, tol: float = 1.0) -> "SurfaceDiceConfig":
        return cls({h: tol for h in HECS})

    def to_dict(self) -> dict:
        return {h.value: self.tolerance_mm[h] for h in HECS}


@dataclass(frozen=True)
class MetricRecord:
    team_id: str
    case_id: str
    composite_idx: int
    hec: HecId
    dice: float
    surface_dice: float

    @property
    def sort_key(self):
        return (self.team_id, self.case_id, self.composite_idx, self.hec.order)


class _Target:
    """One HEC mask of a prediction or ground truth with its surface and search tree."""

    def __init__(self, data: np.ndarray, spacing):
        self.data = data
        self.surface = _surface_from_array(data, spacing)
        self._tree = None

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.surface.points)
        return self._tree

    def score(self, other: "_Target", tol: float) -> tuple[float, float]:
        d = dice_arrays(self.data, other.data)
        sp, sg = self.surface, other.surface
        if len(sp) and len(sg):
            sd = surface_dice_from_surfaces(sp, sg, tol, self.tree, other.tree)
        else:
            sd = surface_dice_from_surfaces(sp, sg, tol)
        return d, sd


@dataclass
class PreparedCase:
    """Ground-truth composites of one case realized once and shared across teams."""

    case: CaseAnnotation
    selectors: list
    targets: list  # per selector: {HecId: _Target}


def prepare_case(c: CaseAnnotation, selectors: Sequence[Sequence[int]]) -> PreparedCase:
    targets = []
    for s in selectors:
        gt = realize_composite(c, s)
        targets.append({h: _Target(np.isin(gt.labels, h.codes), gt.spacing_mm) for h in HECS})
    return PreparedCase(c, [tuple(s) for s in selectors], targets)


def evaluate_prepared(pred: LabelVolume, prepared: PreparedCase, cfg: SurfaceDiceConfig,
                      team_id: str = "") -> list[MetricRecord]:
    c = prepared.case
    require_compatible(pred, c, f"prediction and ground truth of {c.case_id}")
    pred_targets = {h: _Target(np.isin(pred.labels, h.codes), c.spacing_mm) for h in HECS}
    records = []
    for idx, gts in enumerate(prepared.targets):
        for h in HECS:
            d, sd = pred_targets[h].score(gts[h], cfg.tolerance_mm[h])
            records.append(MetricRecord(team_id, c.case_id, idx, h, d, sd))
    return records


def evaluate_case(pred: LabelVolume, c: CaseAnnotation, selectors, cfg: SurfaceDiceConfig | None = None,
                  team_id: str = "") -> list[MetricRecord]:
    cfg = cfg or SurfaceDiceConfig.uniform()
    return evaluate_prepared(pred, prepare_case(c, selectors), cfg, team_id)


METRIC_COLUMNS = ["team_id", "case_id", "composite_idx", "hec", "dice", "surface_dice"]


def format_metrics_csv(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in sorted(records, key=lambda r: r.sort_key):
        w.writerow([r.team_id, r.case_id, r.composite_idx, r.hec.value, f"{r.dice:.6f}", f"{r.surface_dice:.6f}"])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> list[MetricRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != METRIC_COLUMNS:
        raise DataError(f"metrics CSV header must be {METRIC_COLUMNS}, got {reader.fieldnames}")
    out = []
    for n, row in enumerate(reader, start=2):
        try:
            rec = MetricRecord(row["team_id"], row["case_id"], int(row["composite_idx"]),
                               HecId(row["hec"]), float(row["dice"]), float(row["surface_dice"]))
        except ValueError as exc:
            raise DataError(f"metrics CSV line {n}: {exc}") from exc
        if not (0.0 <= rec.dice <= 1.0 and 0.0 <= rec.surface_dice <= 1.0):
            raise DataError(f"metrics CSV line {n}: metric outside [0, 1]")
        out.append(rec)
    return out
