import logging

import numpy as np
import pytest

from cpkern import ridge
from cpkern.errors import DataError, EmptyStratumError, NumericalError
from cpkern.kernels import compute_weights

from helpers import make_dataset, make_weights


def test_ridge_init_shape_finite_deterministic():
    ds = make_dataset(seed=5, p=6, C=3, T=2)
    w = make_weights(ds)
    t1 = ridge.ridge_init(ds, w)
    t2 = ridge.ridge_init(ds, w)
    assert t1.shape == (6, 3, 2)
    assert np.all(np.isfinite(t1))
    assert np.array_equal(t1, t2)
    assert np.any(t1 != 0.0)


def test_ridge_fit_slice_matches_normal_equations():
    ds = make_dataset(seed=6, p=5, C=2, T=1, n_cells=80, n_plaques=10)
    w = make_weights(ds, frac=0.6)
    lam = 3.7
    beta = ridge.ridge_fit_slice(ds, w, 0, 0, lam)

    X_parts, w_parts, y_parts = [], [], []
    for s, blk in zip(ds.samples, w.blocks):
        sel = s.cell_type[blk.cell_idx] == 0
        X_parts.append(s.expression[blk.cell_idx[sel]])
        w_parts.append(blk.weight[sel])
        y_parts.append(s.plaque_size[blk.plaque_idx[sel]])
    X = np.vstack(X_parts)
    ww = np.concatenate(w_parts)
    y = np.concatenate(y_parts)
    A = (X * ww[:, None]).T @ X + lam * np.eye(5)
    expect = np.linalg.solve(A, (X * ww[:, None]).T @ y)
    assert np.allclose(beta, expect, rtol=1e-10)

    grad = -2.0 * (X * ww[:, None]).T @ (y - X @ beta) + 2.0 * lam * beta
    assert np.abs(grad).max() < 1e-8 * (1.0 + np.abs(y).max() ** 2)


def test_ridge_fit_slice_requires_positive_penalty():
    ds = make_dataset(seed=7, p=4)
    w = make_weights(ds)
    with pytest.raises(DataError):
        ridge.ridge_fit_slice(ds, w, 0, 0, 0.0)
    with pytest.raises(DataError):
        ridge.ridge_fit_slice(ds, w, 0, 0, -1.0)


def test_empty_stratum_raises_and_init_zero_fills(caplog):
    ds = make_dataset(seed=8, p=4, C=3, T=2, n_cells=40)
    for s in ds.samples:
        s.cell_type[s.cell_type == 2] = 1
    w = make_weights(ds)
    with pytest.raises(EmptyStratumError):
        ridge.ridge_fit_slice(ds, w, 2, 0, 1.0)
    with caplog.at_level(logging.WARNING, logger="cpkern.ridge"):
        tensor = ridge.ridge_init(ds, w)
    assert np.all(tensor[:, 2, :] == 0.0)
    assert np.any(tensor[:, 0, :] != 0.0)
    assert any("empty stratum" in r.message for r in caplog.records)


def test_single_plaque_stratum_uses_grid_middle(caplog):
    ds = make_dataset(seed=9, p=4, C=2, T=1, n_cells=30, n_plaques=1)
    w = make_weights(ds, frac=2.0)
    cfg = ridge.RidgeConfig(lambda_grid=np.array([0.1, 1.0, 10.0]))
    st = ridge._stratum_triples(ds, w, 0, 0)
    assert st["n_groups"] == 1
    with caplog.at_level(logging.WARNING, logger="cpkern.ridge"):
        lam, grid = ridge._cv_lambda(st, cfg)
    assert lam == 1.0
    assert any("single plaque" in r.message for r in caplog.records)


def test_config_validation():
    with pytest.raises(DataError):
        ridge.RidgeConfig(lambda_grid=np.array([]))
    with pytest.raises(DataError):
        ridge.RidgeConfig(lambda_grid=np.array([1.0, -2.0]))
    with pytest.raises(DataError):
        ridge.RidgeConfig(folds=1)


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_non_finite_gram_raises_numerical_error():
    ds = make_dataset(seed=10, p=4, C=2, T=1)
    for s in ds.samples:
        s.expression *= 1e200
    w = make_weights(ds)
    with pytest.raises(NumericalError):
        ridge.ridge_fit_slice(ds, w, 0, 0, 1.0)


def test_cv_prefers_heavier_penalty_on_pure_noise():
    # With outcomes independent of expression, CV should not pick the
    # smallest penalty in the grid.
    ds = make_dataset(seed=11, p=12, C=2, T=1, n_cells=120, n_plaques=14)
    w = make_weights(ds, frac=0.7)
    cfg = ridge.RidgeConfig(lambda_grid=np.logspace(-8, 6, 15))
    st = ridge._stratum_triples(ds, w, 0, 0)
    lam, grid = ridge._cv_lambda(st, cfg)
    assert lam > grid[0]
