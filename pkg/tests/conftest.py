import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from segrank.annotations import CaseAnnotation, RoiInstance  # noqa: E402
from segrank.volgrid import BinaryMask  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_mask(rng, dims, p=None):
    p = rng.uniform(0.1, 0.6) if p is None else p
    return rng.random(dims) < p


def random_spacing(rng):
    return tuple(float(x) for x in rng.choice([0.5, 0.78, 1.0, 1.5, 2.5, 3.0], size=3))


def make_case(masks_by_roi, spacing=(1.0, 1.0, 1.0), case_id="case_00000"):
    """masks_by_roi: list of (class_code, [bool arrays])."""
    dims = masks_by_roi[0][1][0].shape
    rois = [
        RoiInstance(f"roi_{n}", code, tuple(BinaryMask(m, spacing) for m in ms))
        for n, (code, ms) in enumerate(masks_by_roi)
    ]
    return CaseAnnotation(case_id, dims, spacing, tuple(rois))


@st.composite
def mask_pairs(draw, max_side=8):
    dims = tuple(draw(st.integers(1, max_side)) for _ in range(3))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    spacing = random_spacing(rng)
    return random_mask(rng, dims), random_mask(rng, dims), spacing


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    from segrank.synthetic import generate

    root = tmp_path_factory.mktemp("syn")
    return generate(root)
