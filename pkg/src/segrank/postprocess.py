"""Connected-component cleanup of predicted label volumes.

Small components of each class are dropped, then tumor and cyst components that do
not touch a surviving kidney component are dropped as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volgrid import CYST, KIDNEY, TUMOR, BinaryMask, LabelVolume

DEFAULT_MIN_VOXELS = {KIDNEY: 20000, TUMOR: 200, CYST: 50}
_STRUCTURES = {6: ndimage.generate_binary_structure(3, 1), 26: ndimage.generate_binary_structure(3, 3)}


@dataclass(frozen=True)
class PostprocessRules:
    min_voxels: dict = field(default_factory=lambda: dict(DEFAULT_MIN_VOXELS))
    require_lesion_kidney_contact: bool = True
    connectivity: int = 26

    def __post_init__(self):
        if self.connectivity not in _STRUCTURES:
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        mv = {int(k): int(v) for k, v in self.min_voxels.items()}
        if any(v < 0 for v in mv.values()):
            raise ValueError("size thresholds must be non-negative")
        object.__setattr__(self, "min_voxels", mv)


@dataclass(frozen=True)
class Component:
    labels: np.ndarray
    label: int
    size: int

    @property
    def mask(self) -> np.ndarray:
        return self.labels == self.label


def _label(data: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    return ndimage.label(data, structure=_STRUCTURES[connectivity])


def connected_components(m: BinaryMask | np.ndarray, connectivity: int = 26) -> list[Component]:
    """Components ordered by descending size, then by smallest (i-fastest) linear index."""
    data = m.data if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    labels, n = _label(data, connectivity)
    if n == 0:
        return []
    flat = labels.ravel(order="F")
    sizes = np.bincount(flat, minlength=n + 1)
    ids, first = np.unique(flat, return_index=True)
    first_index = dict(zip(ids.tolist(), first.tolist()))
    order = sorted(range(1, n + 1), key=lambda lab: (-sizes[lab], first_index[lab]))
    labels.setflags(write=False)
    return [Component(labels, lab, int(sizes[lab])) for lab in order]


def _drop_small(data: np.ndarray, min_size: int, connectivity: int) -> np.ndarray:
    if min_size <= 0 or not data.any():
        return data
    labels, n = _label(data, connectivity)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def apply_rules(pred: LabelVolume, rules: PostprocessRules = PostprocessRules()) -> LabelVolume:
    out = pred.labels.copy()
    survivors = {}
    for code in (KIDNEY, TUMOR, CYST):
        present = out == code
        kept = _drop_small(present, rules.min_voxels.get(code, 0), rules.connectivity)
        out[present & ~kept] = 0
        survivors[code] = kept
    if rules.require_lesion_kidney_contact:
        near_kidney = ndimage.binary_dilation(survivors[KIDNEY], structure=_STRUCTURES[26])
        for code in (TUMOR, CYST):
            if not survivors[code].any():
                continue
            labels, n = _label(survivors[code], rules.connectivity)
            touching = np.unique(labels[near_kidney & (labels > 0)])
            keep = np.zeros(n + 1, dtype=bool)
            keep[touching] = True
            keep[0] = False
            out[survivors[code] & ~keep[labels]] = 0
    return LabelVolume(out, pred.spacing_mm)
