"""Label volumes, binary masks and the two-file (JSON header + raw bytes) volume format.

Arrays are held with shape ``(nx, ny, nz)`` and indexed ``[i, j, k]``. On disk the
linear index is ``(k*ny + j)*nx + i`` (i fastest), i.e. Fortran order of that array.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError, VolumeFormatError

BACKGROUND, KIDNEY, TUMOR, CYST = 0, 1, 2, 3
CLASS_NAMES = {BACKGROUND: "background", KIDNEY: "kidney", TUMOR: "tumor", CYST: "cyst"}
CLASS_CODES = {name: code for code, name in CLASS_NAMES.items()}

_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2")}
SPACING_RTOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise VolumeFormatError(f"spacing must have 3 entries, got {len(sp)}")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise VolumeFormatError(f"spacing must be positive, got {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class LabelVolume:
    labels: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise VolumeFormatError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise VolumeFormatError("label values do not fit in 8 bits")
            labels = labels.astype(np.uint8)
        bad = np.setdiff1d(np.unique(labels), list(CLASS_NAMES))
        if bad.size:
            raise VolumeFormatError(f"unknown class codes {bad.tolist()}")
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)

    @classmethod
    def empty(cls, dims, spacing_mm) -> "LabelVolume":
        return cls(np.zeros(tuple(dims), dtype=np.uint8), spacing_mm)

    def mask(self, *codes: int) -> "BinaryMask":
        return BinaryMask(np.isin(self.labels, codes), self.spacing_mm)

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray
    spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeFormatError(f"mask must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype != bool:
            if not np.isin(data, (0, 1)).all():
                raise VolumeFormatError("mask values must be 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing_mm", _check_spacing(self.spacing_mm))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.spacing_mm == other.spacing_mm and np.array_equal(self.data, other.data)

    __hash__ = None


def geometry_compatible(a, b) -> bool:
    """True iff dims match and spacings agree to 1e-6 relative tolerance on every axis."""
    if a.dims != b.dims:
        return False
    return all(
        math.isclose(sa, sb, rel_tol=SPACING_RTOL, abs_tol=0.0)
        for sa, sb in zip(a.spacing_mm, b.spacing_mm)
    )


def require_compatible(a, b, what: str = "volumes") -> None:
    if not geometry_compatible(a, b):
        raise GeometryError(
            f"{what} differ in geometry: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing_mm} vs {b.spacing_mm}"
        )


def voxel_center_mm(v, i: int, j: int, k: int) -> tuple[float, float, float]:
    nx, ny, nz = v.dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise IndexError(f"voxel ({i}, {j}, {k}) outside dims {v.dims}")
    sx, sy, sz = v.spacing_mm
    return ((i + 0.5) * sx, (j + 0.5) * sy, (k + 0.5) * sz)


def linear_index(dims, i: int, j: int, k: int) -> int:
    nx, ny, _ = dims
    return (k * ny + j) * nx + i


def unravel_linear(dims, idx: int) -> tuple[int, int, int]:
    nx, ny, _ = dims
    i = idx % nx
    j = (idx // nx) % ny
    k = idx // (nx * ny)
    return i, j, k


def _header(dims, spacing, dtype: str, raw_file: str, classes: bool) -> dict:
    h = {
        "dims": [int(n) for n in dims],
        "spacing_mm": [float(s) for s in spacing],
        "dtype": dtype,
        "index_order": "i_fastest",
    }
    if classes:
        h["classes"] = {str(code): name for code, name in CLASS_NAMES.items()}
    h["raw_file"] = raw_file
    return h


def _raw_name(path: Path) -> str:
    return path.with_suffix(".raw").name if path.suffix == ".json" else path.name + ".raw"


def _write_pair(array: np.ndarray, spacing, path, dtype: str, classes: bool) -> None:
    path = Path(path)
    raw_name = _raw_name(path)
    header = _header(array.shape, spacing, dtype, raw_name, classes)
    payload = np.asarray(array, dtype=_DTYPES[dtype]).ravel(order="F").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        (path.parent / raw_name).write_bytes(payload)
        path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise VolumeFormatError(f"cannot write volume {path}: {exc}") from exc


def _read_pair(path) -> tuple[dict, np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    if not path.is_file():
        raise VolumeFormatError(f"volume header not found: {path}")
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise VolumeFormatError(f"unreadable volume header {path}: {exc}") from exc
    for key in ("dims", "spacing_mm", "raw_file"):
        if key not in header:
            raise VolumeFormatError(f"{path}: header lacks '{key}'")
    dtype = header.get("dtype", "u8")
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype!r}")
    if header.get("index_order", "i_fastest") != "i_fastest":
        raise VolumeFormatError(f"{path}: unsupported index order {header['index_order']!r}")
    dims = tuple(int(n) for n in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: invalid dims {header['dims']}")
    spacing = _check_spacing(header["spacing_mm"])
    raw_path = path.parent / header["raw_file"]
    if not raw_path.is_file():
        raise VolumeFormatError(f"raw data file not found: {raw_path}")
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims)) * _DTYPES[dtype].itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{raw_path}: size mismatch, header implies {expected} bytes, file has {len(raw)}"
        )
    flat = np.frombuffer(raw, dtype=_DTYPES[dtype])
    return header, flat.reshape(dims, order="F"), spacing


def read_volume(path) -> LabelVolume:
    header, array, spacing = _read_pair(path)
    if header.get("dtype", "u8") != "u8":
        raise VolumeFormatError(f"{path}: label volumes must be u8")
    declared = header.get("classes")
    allowed = set(CLASS_NAMES) if declared is None else {int(c) for c in declared}
    unknown = set(np.unique(array).tolist()) - (allowed & set(CLASS_NAMES))
    if unknown:
        raise VolumeFormatError(f"{path}: label codes {sorted(unknown)} outside declared class set")
    return LabelVolume(array.astype(np.uint8), spacing)


def write_volume(v: LabelVolume, path) -> None:
    _write_pair(v.labels, v.spacing_mm, path, "u8", classes=True)


def read_mask(path) -> BinaryMask:
    v = read_volume(path)
    if v.labels.max() > 1:
        raise VolumeFormatError(f"{path}: delineation contains codes other than 0/1")
    return BinaryMask(v.labels.astype(bool), v.spacing_mm)


def write_mask(m: BinaryMask, path) -> None:
    _write_pair(m.data.astype(np.uint8), m.spacing_mm, path, "u8", classes=True)


def write_count_volume(counts: np.ndarray, spacing_mm, path) -> None:
    """Write a 16-bit count volume (e.g. a per-voxel team tally)."""
    counts = np.asarray(counts)
    if counts.size and (counts.min() < 0 or counts.max() > 0xFFFF):
        raise VolumeFormatError("counts do not fit in 16 bits")
    _write_pair(counts, _check_spacing(spacing_mm), path, "u16", classes=False)


def read_count_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    header, array, spacing = _read_pair(path)
    if header.get("dtype") != "u16":
        raise VolumeFormatError(f"{path}: expected a u16 count volume")
    return array.astype(np.uint16), spacing
