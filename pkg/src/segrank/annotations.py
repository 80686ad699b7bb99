"""Multi-annotator case model: ROI instances with R delineations each, composite
ground truths (one delineation chosen per ROI), sampling, majority voting and
inter-annotator agreement."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, GeometryError, VolumeFormatError
from .volgrid import (
    BACKGROUND,
    CLASS_NAMES,
    CYST,
    KIDNEY,
    TUMOR,
    BinaryMask,
    LabelVolume,
    geometry_compatible,
    read_mask,
    read_volume,
)

COUNT_CAP = 2**63 - 1
# later entries overwrite earlier ones where delineations overlap
DEFAULT_PAINT_ORDER = (KIDNEY, CYST, TUMOR)
DEFAULT_SAMPLES_PER_CASE = 10


@dataclass(frozen=True)
class RoiInstance:
    instance_id: str
    class_code: int
    delineations: tuple[BinaryMask, ...]

    def __post_init__(self):
        object.__setattr__(self, "delineations", tuple(self.delineations))
        if self.class_code not in CLASS_NAMES or self.class_code == BACKGROUND:
            raise DataError(f"ROI {self.instance_id!r}: class must be kidney, tumor or cyst")
        if not self.delineations:
            raise DataError(f"ROI {self.instance_id!r} has no delineations")

    @property
    def n_raters(self) -> int:
        return len(self.delineations)


@dataclass(frozen=True)
class CaseCovariates:
    tumor_size_cm: float
    clear_cell: int
    female: int
    non_caucasian: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tumor_size_cm > 0:
            raise DataError(f"tumor_size_cm must be positive, got {self.tumor_size_cm}")
        for name in ("clear_cell", "female", "non_caucasian"):
            if getattr(self, name) not in (0, 1):
                raise DataError(f"covariate {name} must be 0 or 1")

    @classmethod
    def from_dict(cls, d: dict) -> "CaseCovariates":
        known = ("tumor_size_cm", "clear_cell", "female", "non_caucasian")
        missing = [k for k in known if k not in d]
        if missing:
            raise DataError(f"covariates missing {missing}")
        extra = {k: v for k, v in d.items() if k not in known}
        return cls(float(d["tumor_size_cm"]), int(d["clear_cell"]), int(d["female"]),
                   int(d["non_caucasian"]), extra)


@dataclass(frozen=True)
class CaseAnnotation:
    case_id: str
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    rois: tuple[RoiInstance, ...]
    covariates: CaseCovariates | None = None

    def __post_init__(self):
        object.__setattr__(self, "rois", tuple(self.rois))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        if not self.rois:
            raise DataError(f"case {self.case_id}: at least one ROI is required")
        ids = [r.instance_id for r in self.rois]
        if len(set(ids)) != len(ids):
            raise DataError(f"case {self.case_id}: duplicate ROI instance ids")
        raters = {r.n_raters for r in self.rois}
        if len(raters) != 1:
            raise DataError(f"case {self.case_id}: ROIs have differing delineation counts {sorted(raters)}")
        for roi in self.rois:
            for d in roi.delineations:
                if not geometry_compatible(self, d):
                    raise GeometryError(
                        f"case {self.case_id}: delineation of {roi.instance_id} has geometry "
                        f"{d.dims}/{d.spacing_mm}, reference is {self.dims}/{self.spacing_mm}"
                    )

    @property
    def n_rois(self) -> int:
        return len(self.rois)

    @property
    def n_raters(self) -> int:
        return self.rois[0].n_raters


@dataclass(frozen=True)
class SamplingPlan:
    master_seed: int = 0
    samples_per_case: int = DEFAULT_SAMPLES_PER_CASE

    def __post_init__(self):
        if self.samples_per_case < 1:
            raise ValueError("samples_per_case must be >= 1")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")


def composite_count(c: CaseAnnotation) -> int:
    """R**N, saturating at 2**63 - 1."""
    total = 1
    for _ in range(c.n_rois):
        total *= c.n_raters
        if total > COUNT_CAP:
            return COUNT_CAP
    return total


def _check_selector(c: CaseAnnotation, selector: Sequence[int]) -> tuple[int, ...]:
    selector = tuple(int(s) for s in selector)
    if len(selector) != c.n_rois:
        raise DataError(f"selector length {len(selector)} != {c.n_rois} ROIs in {c.case_id}")
    if any(not 0 <= s < c.n_raters for s in selector):
        raise DataError(f"selector {selector} out of range for R={c.n_raters}")
    return selector


def paint(c: CaseAnnotation, masks: Sequence[np.ndarray], paint_order=DEFAULT_PAINT_ORDER) -> LabelVolume:
    """Merge one boolean array per ROI into a label volume, classes painted in ``paint_order``."""
    out = np.zeros(c.dims, dtype=np.uint8)
    for code in paint_order:
        for roi, m in zip(c.rois, masks):
            if roi.class_code == code:
                out[m] = code
    return LabelVolume(out, c.spacing_mm)


def realize_composite(c: CaseAnnotation, selector: Sequence[int], paint_order=DEFAULT_PAINT_ORDER) -> LabelVolume:
    selector = _check_selector(c, selector)
    return paint(c, [roi.delineations[s].data for roi, s in zip(c.rois, selector)], paint_order)


def case_seed(master_seed: int, case_id: str) -> int:
    digest = hashlib.blake2b(f"{master_seed}:{case_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _decode(code: int, n: int, r: int) -> tuple[int, ...]:
    digits = []
    for _ in range(n):
        code, d = divmod(code, r)
        digits.append(d)
    return tuple(reversed(digits))


_DENSE_LIMIT = 1 << 20


def sample_composites(c: CaseAnnotation, plan: SamplingPlan) -> list[tuple[int, ...]]:
    """Draw min(K, R**N) distinct selectors uniformly, returned in lexicographic order.

    The random stream depends only on (master_seed, case_id).
    """
    n, r = c.n_rois, c.n_raters
    total = composite_count(c)
    k = plan.samples_per_case
    if k >= total:
        return [tuple(s) for s in itertools.product(range(r), repeat=n)]
    rng = np.random.default_rng(case_seed(plan.master_seed, c.case_id))
    if total <= _DENSE_LIMIT:
        codes = rng.choice(total, size=k, replace=False)
        chosen = {_decode(int(code), n, r) for code in codes}
    else:
        chosen: set[tuple[int, ...]] = set()
        while len(chosen) < k:
            chosen.add(tuple(int(x) for x in rng.integers(0, r, size=n)))
    return sorted(chosen)


def majority_aggregate(c: CaseAnnotation, paint_order=DEFAULT_PAINT_ORDER) -> LabelVolume:
    r = c.n_raters
    if r % 2 == 0:
        raise DataError(f"majority vote undefined for an even number of delineations (R={r})")
    masks = []
    for roi in c.rois:
        votes = np.zeros(c.dims, dtype=np.int32)
        for d in roi.delineations:
            votes += d.data
        masks.append(votes * 2 > r)
    return paint(c, masks, paint_order)


def interannotator_agreement(c: CaseAnnotation, class_code: int) -> float | None:
    """Mean Dice over all delineation-index pairs, ROIs of the class merged per index.

    Returns None when the case has no ROI of that class.
    """
    from .metrics import dice_arrays

    rois = [roi for roi in c.rois if roi.class_code == class_code]
    if not rois:
        return None
    r = c.n_raters
    if r < 2:
        raise DataError("agreement needs at least two delineations per ROI")
    merged = []
    for idx in range(r):
        m = np.zeros(c.dims, dtype=bool)
        for roi in rois:
            m |= roi.delineations[idx].data
        merged.append(m)
    scores = [dice_arrays(merged[a], merged[b]) for a, b in itertools.combinations(range(r), 2)]
    return float(np.mean(scores))


def format_agreement(value: float | None) -> str:
    return "absent" if value is None else f"{value:.2f}"


def load_case(manifest_path) -> CaseAnnotation:
    """Load a case manifest; delineation and reference paths are relative to it."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable case manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    try:
        case_id = str(doc["case_id"])
        ref = read_volume(base / doc["reference"])
        rois = []
        for item in doc["rois"]:
            masks = [read_mask(base / p) for p in item["delineations"]]
            rois.append(RoiInstance(str(item["instance_id"]), int(item["class"]), tuple(masks)))
    except KeyError as exc:
        raise DataError(f"{manifest_path}: missing field {exc}") from exc
    except VolumeFormatError as exc:
        raise DataError(f"{manifest_path}: {exc}") from exc
    cov = doc.get("covariates")
    covariates = CaseCovariates.from_dict(cov) if cov else None
    return CaseAnnotation(case_id, ref.dims, ref.spacing_mm, tuple(rois), covariates)
