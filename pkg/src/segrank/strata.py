"""Hidden-strata analyses: regression of per-case performance on patient covariates,
average-linkage clustering of cases by per-team score vectors, and per-voxel
prediction tallies across teams."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist, squareform

from .annotations import CaseCovariates
from .errors import DataError, SingularDesignError
from .volgrid import LabelVolume, require_compatible

COVARIATE_LABELS = {
    "tumor_size_cm": "Tumor Size (cm)",
    "clear_cell": "Clear Cell Subtype",
    "female": "Female Gender",
    "non_caucasian": "Non-Caucasian Race",
}
COVARIATES = tuple(COVARIATE_LABELS)
INTERCEPT = "Intercept"

__all__ = [
    "CaseCovariates", "RegressionResult", "ols_regress", "regress_on_covariates",
    "ClusterTree", "cluster_cases", "CountVolume", "prediction_heatmap",
]


@dataclass(frozen=True)
class RegressionResult:
    names: tuple[str, ...]  # predictors followed by the intercept
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_values: np.ndarray
    p_values: np.ndarray
    n: int
    p: int
    residuals: np.ndarray

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])

    def pvalue(self, name: str) -> float:
        return float(self.p_values[self.names.index(name)])


def _collinear_columns(X: np.ndarray, names: Sequence[str]) -> list[str]:
    kept: list[int] = []
    dropped = []
    for j in range(X.shape[1]):
        trial = kept + [j]
        if np.linalg.matrix_rank(X[:, trial]) == len(trial):
            kept = trial
        else:
            dropped.append(names[j])
    return dropped


def ols_regress(y: Sequence[float], X: np.ndarray, names: Sequence[str] | None = None) -> RegressionResult:
    """Ordinary least squares with an intercept appended as the last column.

    Two-sided p-values come from t statistics on classical (homoskedastic)
    standard errors with n - p - 1 degrees of freedom.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(y) != n:
        raise DataError(f"response has {len(y)} rows, design has {n}")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise DataError("one name per predictor column is required")
    if n <= p + 1:
        raise DataError(f"regression needs n > p + 1 (n={n}, p={p})")
    design = np.column_stack([X, np.ones(n)])
    all_names = names + (INTERCEPT,)
    if np.linalg.matrix_rank(design) < p + 1:
        bad = _collinear_columns(design, all_names)
        raise SingularDesignError(f"design matrix is rank deficient; collinear columns: {bad}")
    q, r = np.linalg.qr(design)
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - design @ beta
    dof = n - p - 1
    sigma2 = float(resid @ resid) / dof
    r_inv = np.linalg.inv(r)
    se = np.sqrt(sigma2 * (r_inv**2).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    pv = 2.0 * stats.t.sf(np.abs(t), dof)
    pv = np.where(np.isnan(pv), 1.0, pv)
    return RegressionResult(all_names, beta, se, t, np.clip(pv, 0.0, 1.0), n, p, resid)


def regress_on_covariates(y_by_case: Mapping[str, float], covariates: Mapping[str, CaseCovariates]) -> RegressionResult:
    """Regress a per-case score on the four canonical covariates (cases sorted by id)."""
    cases = sorted(y_by_case)
    missing = [c for c in cases if c not in covariates or covariates[c] is None]
    if missing:
        raise DataError(f"covariates missing for cases {missing}")
    X = np.array([[getattr(covariates[c], name) for name in COVARIATES] for c in cases], dtype=float)
    y = np.array([y_by_case[c] for c in cases])
    return ols_regress(y, X, [COVARIATE_LABELS[n] for n in COVARIATES])


def _fmt_coef(value: float) -> str:
    s = f"{value:.4f}"
    return s.rstrip("0").rstrip(".") if "." in s else s


def table_rows(res: RegressionResult, alpha: float = 0.05) -> list[tuple[str, str, str]]:
    """Rows of (variable, coefficient, p-value) in the published table style, with an
    asterisk on variables significant at ``alpha``."""
    rows = []
    for name, c, pv in zip(res.names, res.coefficients, res.p_values):
        rows.append((name + ("*" if pv < alpha else ""), _fmt_coef(float(c)), f"{pv:.3f}"))
    return rows


STRATA_COLUMNS = ["variable", "coefficient", "p_value"]


def format_strata_csv(res: RegressionResult, alpha: float = 0.05) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STRATA_COLUMNS)
    for name, c, pv in zip(res.names, res.coefficients, res.p_values):
        w.writerow([name + ("*" if pv < alpha else ""), f"{c:.6f}", f"{pv:.6f}"])
    return buf.getvalue()


@dataclass(frozen=True)
class ClusterTree:
    """Agglomerative merge tree. Leaves are numbered 0..n-1 (sorted case ids); merge k
    creates node n + k, as in a SciPy linkage matrix."""

    leaves: tuple[str, ...]
    merges: tuple[tuple[int, int, float, int], ...]  # (left, right, height, size)
    linkage: str = "average"
    metric: str = "euclidean"

    def height(self, node: int) -> float:
        n = len(self.leaves)
        return 0.0 if node < n else self.merges[node - n][2]

    def _children(self, node: int):
        n = len(self.leaves)
        return None if node < n else self.merges[node - n][:2]

    @property
    def root(self) -> int:
        return 2 * len(self.leaves) - 2

    def leaf_order(self) -> list[str]:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            ch = self._children(node)
            if ch is None:
                out.append(self.leaves[node])
            else:
                stack.extend(reversed(ch))
        return out

    def newick(self) -> str:
        def render(node: int, parent_h: float | None) -> str:
            ch = self._children(node)
            h = self.height(node)
            body = self.leaves[node] if ch is None else f"({render(ch[0], h)},{render(ch[1], h)})"
            return body if parent_h is None else f"{body}:{parent_h - h:.6f}"

        return render(self.root, None) + ";"

    def to_json_dict(self) -> dict:
        return {
            "linkage": self.linkage,
            "metric": self.metric,
            "leaves": list(self.leaves),
            "leaf_order": self.leaf_order(),
            "merges": [{"left": a, "right": b, "height": round(h, 6), "size": s} for a, b, h, s in self.merges],
        }


def cluster_cases(case_ids: Sequence[str], features: np.ndarray) -> ClusterTree:
    """Average-linkage clustering on Euclidean distance between case feature vectors.

    Cases are processed in sorted id order; among equally distant cluster pairs the
    pair whose smallest member ids are lexicographically smallest merges first.
    """
    features = np.asarray(features, dtype=float)
    if len(case_ids) != len(features):
        raise DataError("one feature vector per case is required")
    if len(case_ids) == 0:
        raise DataError("no cases to cluster")
    if len(set(case_ids)) != len(case_ids):
        raise DataError("duplicate case ids")
    if np.isnan(features).any():
        raise DataError("feature matrix is incomplete")
    order = sorted(range(len(case_ids)), key=lambda i: case_ids[i])
    leaves = tuple(case_ids[i] for i in order)
    x = features[order].reshape(len(order), -1)
    n = len(leaves)
    d = squareform(pdist(x)) if n > 1 else np.zeros((1, 1))
    d = d.astype(float)
    np.fill_diagonal(d, np.inf)
    node = list(range(n))  # slot -> current node id
    size = [1] * n
    iu, ju = np.triu_indices(n, 1)
    merges = []
    for k in range(n - 1):
        vals = d[iu, ju]
        m = vals.min()
        first = int(np.flatnonzero(vals == m)[0])
        i, j = iu[first], ju[first]
        a, b = node[i], node[j]
        merges.append((a, b, float(m), size[i] + size[j]))
        row = (size[i] * d[i] + size[j] * d[j]) / (size[i] + size[j])
        d[i, :] = row
        d[:, i] = row
        d[i, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
        size[i] += size[j]
        node[i] = n + k
    return ClusterTree(leaves, tuple(merges))


@dataclass(frozen=True)
class CountVolume:
    counts: np.ndarray  # uint16, shape (nx, ny, nz)
    spacing_mm: tuple[float, float, float]

    @property
    def dims(self):
        return tuple(self.counts.shape)


def prediction_heatmap(preds: Sequence[LabelVolume], class_code: int, reference=None) -> CountVolume:
    """Per-voxel number of teams predicting ``class_code``.

    ``reference`` (anything with dims and spacing_mm) fixes the geometry when
    ``preds`` is empty.
    """
    if not preds:
        if reference is None:
            raise DataError("heatmap of zero predictions needs a reference geometry")
        return CountVolume(np.zeros(reference.dims, dtype=np.uint16), tuple(reference.spacing_mm))
    base = reference if reference is not None else preds[0]
    counts = np.zeros(base.dims, dtype=np.uint16)
    for p in preds:
        require_compatible(p, base, "predictions")
        counts += p.labels == class_code
    return CountVolume(counts, tuple(base.spacing_mm))
