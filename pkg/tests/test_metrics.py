import math

import numpy as np
import oracles
import pytest
from conftest import make_case, mask_pairs
from hypothesis import given
from hypothesis import strategies as st

from segrank.annotations import realize_composite
from segrank.errors import DataError, GeometryError
from segrank.metrics import (
    FIXED_CONSTANT,
    HECS,
    HecId,
    MetricRecord,
    SurfaceDiceConfig,
    SurfaceLossConfig,
    dice,
    evaluate_case,
    extract_surface,
    format_metrics_csv,
    hec_mask,
    parse_metrics_csv,
    surface_dice,
    surface_loss,
)
from segrank.volgrid import CYST, KIDNEY, TUMOR, BinaryMask, LabelVolume


def _m(data, spacing=(1.0, 1.0, 1.0)):
    return BinaryMask(np.asarray(data, bool), spacing)


def _single(dims, *voxels, spacing=(1.0, 1.0, 1.0)):
    a = np.zeros(dims, bool)
    for v in voxels:
        a[v] = True
    return _m(a, spacing)


def test_hec_membership():
    v = LabelVolume(np.array([0, KIDNEY, TUMOR, CYST]).reshape(4, 1, 1), (1, 1, 1))
    assert hec_mask(v, HecId.KIDNEY_AND_MASSES).data.ravel().tolist() == [False, True, True, True]
    assert hec_mask(v, HecId.MASSES).data.ravel().tolist() == [False, False, True, True]
    assert hec_mask(v, HecId.TUMOR).data.ravel().tolist() == [False, False, True, False]
    empty = LabelVolume.empty((2, 2, 2), (1, 1, 1))
    assert all(hec_mask(empty, h).count == 0 for h in HECS)


def test_hec_order_and_names():
    assert [h.value for h in HECS] == ["kidney_and_masses", "masses", "tumor"]


def test_dice_examples():
    a = np.zeros(10, bool)
    b = np.zeros(10, bool)
    a[[0, 1, 2, 3]] = True
    b[[1, 2, 3, 4, 5, 6]] = True
    assert dice(_m(a.reshape(10, 1, 1)), _m(b.reshape(10, 1, 1))) == pytest.approx(0.6, abs=1e-15)
    assert dice(_m(a.reshape(10, 1, 1)), _m(a.reshape(10, 1, 1))) == 1.0
    assert dice(_m(a.reshape(10, 1, 1)), _m(~a.reshape(10, 1, 1))) == 0.0
    z = _m(np.zeros((2, 2, 2)))
    assert dice(z, z) == 1.0
    with pytest.raises(GeometryError):
        dice(z, _m(np.zeros((2, 2, 3))))


def test_surface_examples():
    s = extract_surface(_single((3, 3, 3), (1, 1, 1)))
    assert len(s) == 6 and s.total_area == 6.0
    assert len(extract_surface(_m(np.ones((2, 1, 1))))) == 10
    assert len(extract_surface(_m(np.zeros((3, 3, 3))))) == 0


def test_surface_face_geometry():
    s = extract_surface(_single((2, 2, 2), (0, 0, 0), spacing=(1.0, 2.0, 3.0)))
    got = sorted(zip(map(tuple, s.points.tolist()), s.areas.tolist()))
    want = sorted(oracles.faces(np.pad(np.ones((1, 1, 1), bool), ((0, 1),) * 3), (1.0, 2.0, 3.0)))
    assert got == want
    # x faces have area sy*sz
    assert dict((p, a) for p, a in got)[(0.0, 1.0, 1.5)] == 6.0


def test_surface_dice_examples():
    far = surface_dice(_single((12, 1, 1), (0, 0, 0)), _single((12, 1, 1), (10, 0, 0)), 1.0)
    assert far == 0.0
    a = _single((2, 1, 1), (0, 0, 0))
    b = _single((2, 1, 1), (1, 0, 0))
    expected = oracles.surface_dice(a.data, b.data, (1, 1, 1), 1.0)
    assert surface_dice(a, b, 1.0) == pytest.approx(expected, abs=1e-12)
    # every face lies within 1 mm of the other surface; at 0.5 mm only the shared faces do
    assert expected == 1.0
    assert surface_dice(a, b, 0.5) == pytest.approx(2 / 12, abs=1e-15)
    assert oracles.surface_dice(a.data, b.data, (1, 1, 1), 0.5) == pytest.approx(2 / 12, abs=1e-15)
    assert surface_dice(a, a, 1.0) == 1.0


def test_surface_dice_empty_conventions():
    e = _m(np.zeros((3, 3, 3)))
    f = _single((3, 3, 3), (1, 1, 1))
    assert surface_dice(e, e, 1.0) == 1.0
    assert surface_dice(e, f, 1.0) == 0.0
    assert surface_dice(f, e, 1.0) == 0.0
    with pytest.raises(ValueError):
        surface_dice(f, f, 0.0)


def test_tolerance_boundary_inclusive():
    # faces exactly 1.0 mm apart count as within a 1.0 mm tolerance
    a = _single((3, 1, 1), (0, 0, 0))
    b = _single((3, 1, 1), (2, 0, 0))
    assert surface_dice(a, b, 1.0) == pytest.approx(oracles.surface_dice(a.data, b.data, (1, 1, 1), 1.0), abs=1e-12)
    assert surface_dice(a, b, 1.0) > 0


@given(mask_pairs(max_side=7), st.sampled_from([0.5, 1.0, 1.5, 2.0, 3.0]))
def test_metrics_match_oracle(pair, tol):
    a, b, spacing = pair
    assert dice(_m(a, spacing), _m(b, spacing)) == pytest.approx(oracles.dice_sets(a, b), abs=1e-12)
    got = surface_dice(_m(a, spacing), _m(b, spacing), tol)
    assert got == pytest.approx(oracles.surface_dice(a, b, spacing, tol), abs=1e-9)


@given(mask_pairs(max_side=8))
def test_symmetry_and_range(pair):
    a, b, spacing = pair
    ma, mb = _m(a, spacing), _m(b, spacing)
    assert dice(ma, mb) == dice(mb, ma)
    assert surface_dice(ma, mb, 1.0) == pytest.approx(surface_dice(mb, ma, 1.0), abs=1e-12)
    assert 0.0 <= surface_dice(ma, mb, 1.0) <= 1.0


@given(mask_pairs(max_side=8))
def test_surface_dice_monotone_in_tolerance(pair):
    a, b, spacing = pair
    ma, mb = _m(a, spacing), _m(b, spacing)
    values = [surface_dice(ma, mb, t) for t in (0.25, 0.5, 1.0, 2.0, 4.0, 100.0)]
    assert all(x <= y + 1e-15 for x, y in zip(values, values[1:]))
    if a.any() and b.any():
        assert values[-1] == 1.0


def test_surface_loss_examples():
    gt = _single((3, 3, 3), (1, 1, 1))
    assert surface_loss(gt, gt) == 0.0
    # FP voxel center at x=3.5; nearest gt face center at (1.0, 0.5, 0.5) → 2.5 mm
    gt = _single((4, 1, 1), (0, 0, 0))
    pred = _single((4, 1, 1), (0, 0, 0), (3, 0, 0))
    assert surface_loss(pred, gt) == pytest.approx(2.5, abs=1e-12)
    assert surface_loss(pred, gt) == pytest.approx(oracles.surface_loss(pred.data, gt.data, (1, 1, 1)), abs=1e-12)
    with pytest.raises(DataError):
        surface_loss(gt, _m(np.zeros((4, 1, 1))))


@given(mask_pairs(max_side=6), st.floats(0.5, 20))
def test_surface_loss_matches_oracle(pair, c):
    a, b, spacing = pair
    if not b.any():
        b[0, 0, 0] = True
    pred, gt = _m(a, spacing), _m(b, spacing)
    assert surface_loss(pred, gt) == pytest.approx(oracles.surface_loss(a, b, spacing), abs=1e-9)
    fixed = surface_loss(pred, gt, SurfaceLossConfig(FIXED_CONSTANT, c))
    assert fixed == pytest.approx(oracles.surface_loss(a, b, spacing, c), rel=1e-12, abs=1e-12)
    doubled = surface_loss(pred, gt, SurfaceLossConfig(FIXED_CONSTANT, 2 * c))
    assert doubled == pytest.approx(fixed / 2, rel=1e-12, abs=1e-15)
    assert (surface_loss(pred, gt) == 0) == np.array_equal(a, b)


def test_surface_loss_config_validation():
    with pytest.raises(ValueError):
        SurfaceLossConfig("median")
    with pytest.raises(ValueError):
        SurfaceLossConfig(FIXED_CONSTANT, 0)


def _two_roi_case():
    k = np.zeros((6, 6, 4), bool)
    k[1:5, 1:5, 1:3] = True
    t0 = np.zeros_like(k)
    t0[2:4, 2:4, 1] = True
    t1 = np.zeros_like(k)
    t1[2:5, 2:4, 1:3] = True
    return make_case([(KIDNEY, [k, k, k]), (TUMOR, [t0, t1, t0])], spacing=(0.8, 0.8, 2.0))


def test_evaluate_case_perfect_prediction():
    c = _two_roi_case()
    for sel in [(0, 0), (0, 1)]:
        recs = evaluate_case(realize_composite(c, sel), c, [sel])
        assert len(recs) == 3
        assert all(r.dice == 1.0 and r.surface_dice == 1.0 for r in recs)


def test_evaluate_case_record_count_and_empty():
    c = _two_roi_case()
    recs = evaluate_case(realize_composite(c, (0, 0)), c, [(0, 0), (0, 1)], team_id="t")
    assert len(recs) == 6
    assert [(r.composite_idx, r.hec) for r in recs] == [(i, h) for i in range(2) for h in HECS]
    assert any(r.dice < 1.0 for r in recs if r.composite_idx == 1 and r.hec is HecId.TUMOR)
    blank = evaluate_case(LabelVolume.empty(c.dims, c.spacing_mm), c, [(0, 0)])
    assert all(r.dice == 0.0 and r.surface_dice == 0.0 for r in blank)
    with pytest.raises(GeometryError):
        evaluate_case(LabelVolume.empty(c.dims, (1, 1, 1)), c, [(0, 0)])


def test_evaluate_case_matches_direct_metrics():
    c = _two_roi_case()
    rng = np.random.default_rng(5)
    pred = LabelVolume(rng.integers(0, 4, c.dims), c.spacing_mm)
    cfg = SurfaceDiceConfig({HecId.KIDNEY_AND_MASSES: 2.0, HecId.MASSES: 1.0, HecId.TUMOR: 0.5})
    for r in evaluate_case(pred, c, [(0, 1)], cfg):
        gt = realize_composite(c, (0, 1))
        assert r.dice == dice(hec_mask(pred, r.hec), hec_mask(gt, r.hec))
        assert r.surface_dice == surface_dice(hec_mask(pred, r.hec), hec_mask(gt, r.hec), cfg.tolerance_mm[r.hec])


def test_metrics_csv_round_trip():
    recs = [MetricRecord("b", "case_1", 0, HecId.TUMOR, 0.5, 1 / 3),
            MetricRecord("a", "case_1", 0, HecId.MASSES, 1.0, 0.25)]
    text = format_metrics_csv(recs)
    lines = text.splitlines()
    assert lines[0] == "team_id,case_id,composite_idx,hec,dice,surface_dice"
    assert lines[1] == "a,case_1,0,masses,1.000000,0.250000"
    assert lines[2] == "b,case_1,0,tumor,0.500000,0.333333"
    back = parse_metrics_csv(text)
    assert back[1].surface_dice == pytest.approx(1 / 3, abs=1e-6)
    with pytest.raises(DataError):
        parse_metrics_csv("a,b\n1,2\n")
    with pytest.raises(DataError):
        parse_metrics_csv(text.replace("0.500000", "1.5"))


def test_surface_dice_config():
    with pytest.raises(ValueError):
        SurfaceDiceConfig({HecId.TUMOR: 1.0})
    cfg = SurfaceDiceConfig({"kidney_and_masses": 1, "masses": 2, "tumor": 3})
    assert cfg.to_dict() == {"kidney_and_masses": 1.0, "masses": 2.0, "tumor": 3.0}
    assert math.isclose(SurfaceDiceConfig.uniform(1.5).tolerance_mm[HecId.MASSES], 1.5)
