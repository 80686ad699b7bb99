import re

import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segrank.annotations import CaseCovariates
from segrank.errors import DataError, GeometryError, SingularDesignError
from segrank.strata import (
    INTERCEPT,
    cluster_cases,
    format_strata_csv,
    ols_regress,
    prediction_heatmap,
    regress_on_covariates,
    table_rows,
)
from segrank.volgrid import KIDNEY, TUMOR, LabelVolume


def test_exact_fit_recovered():
    rng = np.random.default_rng(0)
    X = rng.random((30, 4))
    beta = np.array([0.5, -1.25, 2.0, 0.0781])
    y = X @ beta + 0.3
    res = ols_regress(y, X)
    assert np.allclose(res.coefficients, [*beta, 0.3], atol=1e-10)
    assert res.names[-1] == INTERCEPT
    nonzero = np.abs(res.coefficients) > 1e-6
    assert np.all(res.p_values[nonzero] < 1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_matches_extended_precision_oracle(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 4)) * rng.uniform(0.1, 10, 4)
    y = X @ rng.normal(size=4) + rng.normal(size=50)
    want, _ = oracles.normal_equations(y, X)
    assert np.allclose(ols_regress(y, X).coefficients, want, rtol=0, atol=1e-8)


def test_standard_errors_and_p_values():
    rng = np.random.default_rng(3)
    X = rng.random((40, 2))
    y = X @ [1.0, -0.5] + rng.normal(scale=0.2, size=40)
    res = ols_regress(y, X, ["a", "b"])
    # classical covariance sigma^2 (A'A)^-1 from the explicit formula
    A = np.column_stack([X, np.ones(40)])
    resid = y - A @ np.linalg.lstsq(A, y, rcond=None)[0]
    cov = resid @ resid / (40 - 3) * np.linalg.inv(A.T @ A)
    assert np.allclose(res.std_errors, np.sqrt(np.diag(cov)), rtol=1e-9)
    from scipy import stats

    t = res.coefficients / res.std_errors
    assert np.allclose(res.p_values, 2 * stats.t.sf(np.abs(t), 37), rtol=1e-9)
    assert np.all((res.p_values >= 0) & (res.p_values <= 1))


def test_singular_design_names_columns():
    X = np.column_stack([np.arange(10.0), np.arange(10.0) * 2, np.random.default_rng(1).random(10)])
    with pytest.raises(SingularDesignError, match="beta"):
        ols_regress(np.arange(10.0), X, ["alpha", "beta", "gamma"])
    const = np.column_stack([np.ones(10), np.arange(10.0)])
    with pytest.raises(SingularDesignError, match="Intercept"):
        ols_regress(np.arange(10.0), const, ["one", "x"])


def test_too_few_cases():
    with pytest.raises(DataError, match="n > p"):
        ols_regress([1, 2, 3], np.eye(3)[:, :2])


def test_published_row_style():
    names = ("Female Gender", INTERCEPT)
    from segrank.strata import RegressionResult

    res = RegressionResult(names, np.array([0.0781, 0.5]), np.ones(2), np.ones(2),
                           np.array([0.022, 0.4]), 20, 1, np.zeros(20))
    assert table_rows(res)[0] == ("Female Gender*", "0.0781", "0.022")
    assert table_rows(res)[1] == ("Intercept", "0.5", "0.400")
    text = format_strata_csv(res)
    assert text.splitlines() == ["variable,coefficient,p_value", "Female Gender*,0.078100,0.022000",
                                 "Intercept,0.500000,0.400000"]


def test_regress_on_covariates_labels():
    rng = np.random.default_rng(5)
    cov = {f"c{i}": CaseCovariates(float(rng.uniform(1, 8)), i % 2, (i // 2) % 2, int(i % 3 == 0))
           for i in range(16)}
    y = {c: float(rng.random()) for c in cov}
    res = regress_on_covariates(y, cov)
    assert res.names == ("Tumor Size (cm)", "Clear Cell Subtype", "Female Gender", "Non-Caucasian Race", INTERCEPT)
    with pytest.raises(DataError):
        regress_on_covariates({**y, "extra": 0.5}, cov)


def test_cluster_identical_vectors_merge_at_zero():
    tree = cluster_cases(["b", "a", "c"], np.array([[0.5, 0.5], [0.9, 0.1], [0.5, 0.5]]))
    assert tree.leaves == ("a", "b", "c")
    assert tree.merges[0][:3] == (1, 2, 0.0)


def test_cluster_collinear_points():
    tree = cluster_cases(["p0", "p1", "p3"], np.array([[0.0], [1.0], [3.0]]))
    assert [m[2] for m in tree.merges] == [1.0, 2.5]
    assert tree.newick() == "(p3:2.500000,(p0:0.500000,p1:0.500000):1.500000);" or \
        tree.newick() == "((p0:1.000000,p1:1.000000):1.500000,p3:2.500000);"


def test_cluster_single_case():
    tree = cluster_cases(["only"], np.array([[0.3]]))
    assert tree.merges == () and tree.newick() == "only;"
    assert tree.leaf_order() == ["only"]


def test_cluster_tie_break_by_smallest_pair():
    # four equidistant corners of a square: first merge is (a, b)
    tree = cluster_cases(["d", "c", "b", "a"], np.array([[1.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 0.0]]))
    assert tree.leaves == ("a", "b", "c", "d")
    assert tree.merges[0][:2] == (0, 1)


@given(seed=st.integers(0, 2**31), n=st.integers(2, 9))
def test_cluster_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3))
    tree = cluster_cases([f"case_{i}" for i in range(n)], x)
    heights = [m[2] for m in tree.merges]
    assert len(tree.merges) == n - 1
    assert np.allclose(heights, oracles.average_linkage_heights(x), atol=1e-12)
    assert all(a <= b + 1e-12 for a, b in zip(heights, heights[1:]))
    assert sorted(tree.leaf_order()) == list(tree.leaves)
    assert tree.merges[-1][3] == n
    newick = tree.newick()
    assert newick.endswith(";") and newick.count("(") == n - 1
    lengths = [float(v) for v in re.findall(r":(-?[0-9.]+)", newick)]
    assert all(v >= 0 for v in lengths) and len(lengths) == 2 * n - 2


def test_cluster_validation():
    with pytest.raises(DataError):
        cluster_cases(["a", "a"], np.zeros((2, 1)))
    with pytest.raises(DataError):
        cluster_cases(["a", "b"], np.array([[0.1], [np.nan]]))


def test_heatmap_hand_counts():
    sp = (1, 1, 1)
    a = np.zeros((2, 2, 2), np.uint8)
    b, c = a.copy(), a.copy()
    a[0, 0, 0] = a[1, 0, 0] = TUMOR
    b[1, 0, 0] = b[1, 1, 1] = TUMOR
    c[1, 0, 0] = TUMOR
    c[0, 0, 0] = KIDNEY
    preds = [LabelVolume(v, sp) for v in (a, b, c)]
    hm = prediction_heatmap(preds, TUMOR)
    assert np.array_equal(hm.counts, oracles.tally([a, b, c], TUMOR))
    assert hm.counts[1, 0, 0] == 3 and hm.counts[0, 0, 0] == 1 and hm.counts[1, 1, 1] == 1
    assert hm.counts.sum() == 5


def test_heatmap_identical_and_empty():
    rng = np.random.default_rng(2)
    v = LabelVolume(rng.integers(0, 4, (3, 3, 3)), (1, 1, 1))
    assert set(np.unique(prediction_heatmap([v] * 5, TUMOR).counts)) <= {0, 5}
    empty = prediction_heatmap([], TUMOR, reference=v)
    assert empty.dims == (3, 3, 3) and not empty.counts.any()
    with pytest.raises(GeometryError):
        prediction_heatmap([v, LabelVolume.empty((3, 3, 4), (1, 1, 1))], TUMOR)
