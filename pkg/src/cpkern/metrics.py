"""Evaluation: coefficient MSE, ROC/AUC over the support, the
nearest-cell LASSO baseline, and per-component summary tables."""

import dataclasses
import logging

import numpy as np
from scipy.spatial.distance import cdist
import sklearn
from sklearn.linear_model import LassoCV
from sklearn.model_selection import KFold

from .errors import DataError

logger = logging.getLogger(__name__)

_SKLEARN_INT_ALPHAS = tuple(
    int(part) for part in sklearn.__version__.split(".")[:2]) >= (1, 7)


def coefficient_mse(estimate, truth):
    """Mean squared entrywise difference of two dense tensors."""
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise DataError("tensor shapes differ: %s vs %s"
                        % (estimate.shape, truth.shape))
    return float(np.mean((estimate - truth) ** 2))


def roc_auc(estimate, truth):
    """Support-recovery ROC of |estimate| against the true support.

    An entry is selected at threshold tau when |estimate| >= tau; the
    sweep runs over all unique magnitudes plus 0 and infinity, points
    are augmented with (0,0) and (1,1), sorted by (fpr, tpr), and the
    area is the trapezoidal integral. Returns (auc, points).
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise DataError("tensor shapes differ: %s vs %s"
                        % (estimate.shape, truth.shape))
    pos = truth.ravel() != 0
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("true support must contain both zero and nonzero "
                        "entries for ROC rates to be defined")
    mag = np.abs(estimate.ravel())
    thresholds = np.concatenate([np.unique(mag), [0.0, np.inf]])
    points = [(0.0, 0.0), (1.0, 1.0)]
    for tau in thresholds:
        sel = mag >= tau
        tpr = float(np.count_nonzero(sel & pos)) / n_pos
        fpr = float(np.count_nonzero(sel & ~pos)) / n_neg
        points.append((fpr, tpr))
    points.sort()
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return float(auc), points


@dataclasses.dataclass
class PairedLassoConfig:
    folds: int = 5
    stratified: bool = True
    n_alphas: int = 100
    max_iter: int = 20000

    def validate(self):
        if self.folds < 2:
            raise DataError("folds must be >= 2")
        if self.n_alphas < 1 or self.max_iter < 1:
            raise DataError("n_alphas and max_iter must be >= 1")


def _pair_rows(dataset):
    """Nearest predictor cell per plaque (ties toward the smaller cell
    index); returns stacked X, y, type code, time code arrays."""
    xs, ys, cs, ts = [], [], [], []
    for sample in dataset.samples:
        if sample.cell_xy.shape[0] == 0:
            raise DataError("sample %s has no cells to pair with"
                            % sample.sample_id)
        d = cdist(sample.plaque_xy, sample.cell_xy)
        nearest = np.argmin(d, axis=1)
        xs.append(sample.expression[nearest])
        ys.append(sample.plaque_size)
        cs.append(sample.cell_type[nearest])
        ts.append(np.full(nearest.size, sample.time_index, dtype=np.int64))
    return (np.vstack(xs), np.concatenate(ys), np.concatenate(cs),
            np.concatenate(ts))


def _lasso_coefs(X, y, config):
    n = X.shape[0]
    folds = min(config.folds, n)
    # sklearn >= 1.7 accepts an alpha count through `alphas`; `n_alphas`
    # is deprecated there but required on older releases.
    if _SKLEARN_INT_ALPHAS:
        grid = {"alphas": config.n_alphas}
    else:
        grid = {"n_alphas": config.n_alphas}
    model = LassoCV(fit_intercept=False, max_iter=config.max_iter,
                    cv=KFold(n_splits=folds, shuffle=False), **grid)
    model.fit(X, y)
    return model.coef_


def paired_lasso(dataset, config=None):
    """Nearest-cell LASSO baseline assembled into a p x C x T tensor.

    Each plaque is paired with its nearest cell; an L1 regression with
    cross-validated penalty (plaque-level folds, no intercept) is fit
    per (paired cell type, time) stratum, or once over all pairs when
    stratified is off. Strata with fewer than 2 pairs give a zero slice
    with a warning.
    """
    if config is None:
        config = PairedLassoConfig()
    config.validate()
    X, y, ctype, time = _pair_rows(dataset)
    p = X.shape[1]
    C = len(dataset.cell_type_labels)
    T = len(dataset.time_values)
    beta = np.zeros((p, C, T))
    if not config.stratified:
        if X.shape[0] < 2:
            logger.warning("fewer than 2 pairs overall, returning the "
                           "all-zero tensor")
            return beta
        coef = _lasso_coefs(X, y, config)
        beta[:] = coef[:, np.newaxis, np.newaxis]
        return beta
    for c in range(C):
        for t in range(T):
            mask = (ctype == c) & (time == t)
            n = int(mask.sum())
            if n < 2:
                logger.warning(
                    "stratum (%s, t=%s) has %d pair(s); slice set to zero",
                    dataset.cell_type_labels[c], dataset.time_values[t], n)
                continue
            beta[:, c, t] = _lasso_coefs(X[mask], y[mask], config)
    return beta


def summarize_strength(model):
    """Per-slice effect size: A[c,t] = l2 norm over genes, and the
    per-slice mean effect. Returns (A, mean)."""
    dense = model.to_dense()
    A = np.linalg.norm(dense, axis=0)
    mean = dense.mean(axis=0)
    return A, mean


def net_direction(model, r):
    """Product over the three modes of sum(entries)/sum(|entries|)."""
    out = 1.0
    for q in (model.q1, model.q2, model.q3):
        col = q[:, r]
        denom = float(np.abs(col).sum())
        if denom == 0.0:
            raise DataError("net direction undefined: mode with all-zero "
                            "entries in component %d" % r)
        out *= float(col.sum()) / denom
    return out


@dataclasses.dataclass
class ComponentSummary:
    """Table-shaped model summary: per-component rows plus per-slice
    strength grids."""

    components: list
    strength: np.ndarray
    mean_effect: np.ndarray


def _top_entries(col, top_k, labels):
    order = np.argsort(-np.abs(col), kind="stable")[:top_k]
    return [{"index": int(i),
             "label": labels[i] if labels is not None else str(int(i)),
             "loading": float(col[i])} for i in order]


def component_table(model, top_k, gene_ids=None, cell_type_labels=None,
                    time_values=None):
    """Components sorted by weight (descending, ties toward the smaller
    index), each with NetDir and the top_k |loading| entries per mode."""
    order = np.argsort(-model.w, kind="stable")
    time_labels = [str(v) for v in time_values] if time_values is not None \
        else None
    rows = []
    for r in order:
        rows.append({
            "component": int(r),
            "weight": float(model.w[r]),
            "net_direction": net_direction(model, int(r)),
            "top_genes": _top_entries(model.q1[:, r], top_k, gene_ids),
            "top_cell_types": _top_entries(model.q2[:, r], top_k,
                                           cell_type_labels),
            "top_times": _top_entries(model.q3[:, r], top_k, time_labels),
        })
    A, mean = summarize_strength(model)
    return ComponentSummary(components=rows, strength=A, mean_effect=mean)


@dataclasses.dataclass
class EvalReport:
    mse: float
    auc: float
    roc_points: list
    method: str = "proposed"


def evaluate_estimate(estimate, truth, method="proposed"):
    auc, points = roc_auc(estimate, truth)
    return EvalReport(mse=coefficient_mse(estimate, truth), auc=auc,
                      roc_points=points, method=method)
