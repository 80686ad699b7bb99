import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segrank.postprocess import DEFAULT_MIN_VOXELS, PostprocessRules, apply_rules, connected_components
from segrank.volgrid import CYST, KIDNEY, TUMOR, BinaryMask, LabelVolume, linear_index


def _vol(labels):
    return LabelVolume(labels, (1.0, 1.0, 1.0))


def test_default_thresholds():
    assert DEFAULT_MIN_VOXELS == {KIDNEY: 20000, TUMOR: 200, CYST: 50}


def test_diagonal_connectivity():
    a = np.zeros((2, 2, 1), bool)
    a[0, 0, 0] = a[1, 1, 0] = True
    assert len(connected_components(a, 26)) == 1
    assert len(connected_components(a, 6)) == 2
    assert connected_components(np.zeros((3, 3, 3), bool)) == []
    with pytest.raises(ValueError):
        connected_components(a, 18)


def test_component_order():
    a = np.zeros((7, 1, 1), bool)
    a[[0, 2, 3, 5, 6]] = True
    comps = connected_components(BinaryMask(a, (1, 1, 1)), 6)
    assert [c.size for c in comps] == [2, 2, 1]
    # equal sizes ordered by smallest linear index
    assert np.flatnonzero(comps[0].mask.ravel())[0] == 2
    assert np.flatnonzero(comps[1].mask.ravel())[0] == 5


@given(seed=st.integers(0, 2**31), connectivity=st.sampled_from([6, 26]), side=st.integers(1, 8))
def test_components_match_flood_fill(seed, connectivity, side):
    rng = np.random.default_rng(seed)
    dims = (side, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
    a = rng.random(dims) < rng.uniform(0.1, 0.6)
    got = connected_components(a, connectivity)
    want = oracles.flood_fill(a, connectivity)
    assert sorted(map(frozenset, (oracles.voxels(c.mask) for c in got)), key=sorted) == \
        sorted(map(frozenset, want), key=sorted)
    keys = [(-c.size, min(linear_index(dims, *v) for v in oracles.voxels(c.mask))) for c in got]
    assert keys == sorted(keys)


def _tumor_block(vol, origin, n):
    """Place an n-voxel compact tumor component starting at ``origin``."""
    x0, y0, z0 = origin
    placed = 0
    for k in range(10):
        for j in range(10):
            for i in range(10):
                if placed == n:
                    return
                vol[x0 + i, y0 + j, z0 + k] = TUMOR
                placed += 1


def test_isolated_150_voxel_tumor_removed():
    labels = np.zeros((20, 20, 20), np.uint8)
    _tumor_block(labels, (2, 2, 2), 150)
    out = apply_rules(_vol(labels))
    assert (out.labels == TUMOR).sum() == 0
    # the size rule alone removes it, contact aside
    out = apply_rules(_vol(labels), PostprocessRules(require_lesion_kidney_contact=False))
    assert (out.labels == TUMOR).sum() == 0


def test_250_voxel_tumor_on_kidney_kept():
    labels = np.zeros((40, 30, 30), np.uint8)
    labels[0:27, 0:30, 0:25] = KIDNEY  # 20250 voxels
    _tumor_block(labels, (27, 5, 5), 250)
    out = apply_rules(_vol(labels))
    assert np.array_equal(out.labels, labels)


def test_scaled_thresholds_on_small_grid():
    labels = np.zeros((20, 20, 20), np.uint8)
    labels[0:10, 0:20, 0:10] = KIDNEY
    _tumor_block(labels, (10, 0, 0), 250)
    _tumor_block(labels, (10, 10, 12), 220)  # large enough but floating
    _tumor_block(labels, (0, 0, 12), 150)  # touches nothing, too small
    rules = PostprocessRules({KIDNEY: 2000, TUMOR: 200, CYST: 50})
    out = apply_rules(_vol(labels), rules)
    assert (out.labels == TUMOR).sum() == 250
    assert (out.labels == KIDNEY).sum() == 2000


def test_lesion_on_removed_kidney_fragment():
    labels = np.zeros((20, 20, 20), np.uint8)
    labels[0:3, 0:3, 0:3] = KIDNEY  # 27-voxel fragment, below threshold
    labels[3:9, 0:6, 0:6] = CYST
    out = apply_rules(_vol(labels), PostprocessRules({KIDNEY: 100, TUMOR: 200, CYST: 50}))
    assert not out.labels.any()
    out = apply_rules(_vol(labels), PostprocessRules({KIDNEY: 100, TUMOR: 200, CYST: 50},
                                                     require_lesion_kidney_contact=False))
    assert (out.labels == CYST).sum() == 216


def test_background_unchanged():
    v = LabelVolume.empty((5, 5, 5), (1, 1, 1))
    assert apply_rules(v) == v


@given(seed=st.integers(0, 2**31), connectivity=st.sampled_from([6, 26]), contact=st.booleans())
def test_idempotent(seed, connectivity, contact):
    rng = np.random.default_rng(seed)
    dims = tuple(int(x) for x in rng.integers(4, 14, 3))
    v = LabelVolume(rng.choice(4, dims, p=[0.4, 0.3, 0.2, 0.1]), (1, 1, 1))
    rules = PostprocessRules({KIDNEY: int(rng.integers(0, 60)), TUMOR: int(rng.integers(0, 20)),
                              CYST: int(rng.integers(0, 20))}, contact, connectivity)
    once = apply_rules(v, rules)
    assert apply_rules(once, rules) == once
    # only ever removes labels
    assert np.all((once.labels == v.labels) | (once.labels == 0))


def test_rules_validation():
    with pytest.raises(ValueError):
        PostprocessRules(connectivity=8)
    with pytest.raises(ValueError):
        PostprocessRules({KIDNEY: -1})
