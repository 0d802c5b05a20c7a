import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest

from cpkern import selection
from cpkern.cp import CPModel
from cpkern.errors import DataError
from cpkern.kernels import bandwidth_candidates, compute_weights
from cpkern.solver import SolverConfig

from helpers import make_dataset


def _fake_fit(loss, model=None, lam=1.0):
    if model is None:
        model = CPModel.zeros(5, 2, 2)
    return SimpleNamespace(weighted_loss=float(loss), model=model, lam=lam)


def _fake_weights(n):
    return SimpleNamespace(n_positive=n)


def test_bic_hand_example():
    got = selection.bic_criterion(_fake_fit(400.0), _fake_weights(100))
    assert got == pytest.approx(100.0 * math.log(4.0), rel=1e-12)
    assert got == pytest.approx(138.6294, abs=1e-3)


def test_bic_entry_adds_log_nstar():
    base = selection.bic_criterion(_fake_fit(400.0), _fake_weights(100))
    m = CPModel(w=np.array([1.0]), q1=np.zeros((5, 1)),
                q2=np.zeros((2, 1)), q3=np.zeros((2, 1)))
    m.q1[0, 0] = 0.37
    got = selection.bic_criterion(_fake_fit(400.0, m), _fake_weights(100))
    assert got - base == pytest.approx(math.log(100.0), rel=1e-12)


def test_count_nonzero_factors_tolerance_and_weights_excluded():
    m = CPModel(w=np.array([5.0]), q1=np.zeros((4, 1)),
                q2=np.zeros((3, 1)), q3=np.zeros((2, 1)))
    assert selection.count_nonzero_factors(m) == 0
    m.q1[0, 0] = 1e-12
    assert selection.count_nonzero_factors(m) == 0
    m.q1[0, 0] = 2e-12
    m.q2[2, 0] = -0.4
    m.q3[1, 0] = 1.0
    assert selection.count_nonzero_factors(m) == 3


def test_bic_zero_loss_warns_minus_inf(caplog):
    with caplog.at_level(logging.WARNING, logger="cpkern.selection"):
        got = selection.bic_criterion(_fake_fit(0.0), _fake_weights(10))
    assert got == -math.inf
    assert any("zero weighted loss" in r.message for r in caplog.records)


def test_bic_requires_positive_weights():
    with pytest.raises(DataError):
        selection.bic_criterion(_fake_fit(1.0), _fake_weights(0))
    with pytest.raises(DataError):
        selection.normalized_loss(_fake_fit(1.0), _fake_weights(0))


def test_normalized_loss_hand_example():
    # weights (1, 3) with residuals (2, 0): loss 4 over 2 triples
    assert selection.normalized_loss(_fake_fit(4.0), _fake_weights(2)) == 2.0


def test_lambda_chain_arithmetic():
    lam = 1e5
    for _ in range(21):
        lam = lam * 0.9
    assert lam == pytest.approx(1.094e4, rel=1e-3)
    assert lam == pytest.approx(1e5 * 0.9 ** 21, rel=1e-12)


def _tiny_path(lambda_max=1e4, max_steps=12, steps_past_best=3, seed=80,
               L=6):
    ds = make_dataset(seed=seed, p=5, C=2, T=2, n_cells=40, n_plaques=8)
    config = selection.SelectionConfig(
        lambda_max=lambda_max, max_steps=max_steps,
        steps_past_best=steps_past_best, L_grid=(L,), R_max=3,
        solver=SolverConfig(max_outer_iters=150))
    h = bandwidth_candidates(ds, (L,)).column(L)
    weights = compute_weights(ds, h)
    return ds, weights, config


def test_lambda_path_structure():
    ds, weights, config = _tiny_path()
    records = selection.lambda_path(ds, weights, config, L=6)
    assert 1 <= len(records) <= config.max_steps

    lams = [r.lam for r in records]
    assert lams[0] == 1e4
    for k in range(len(records) - 1):
        assert lams[k + 1] == lams[k] * 0.9

    assert records[0].fit.rank == 0

    flags = [r.selected_lambda for r in records]
    assert sum(flags) == 1
    bics = [r.bic for r in records]
    chosen = flags.index(True)
    assert chosen == min(range(len(bics)), key=lambda i: (bics[i], i))

    if len(records) < config.max_steps:
        latest_best = max(range(len(bics)), key=lambda i: (-bics[i], i))
        assert len(bics) - 1 - latest_best == config.steps_past_best

    for r in records:
        assert r.L == 6
        assert r.n_star == weights.n_positive
        assert r.normalized_loss == pytest.approx(
            r.fit.weighted_loss / weights.n_positive, rel=1e-12)


def test_lambda_path_doubles_until_all_zero(caplog):
    ds, weights, config = _tiny_path(lambda_max=1e-5, max_steps=3,
                                     steps_past_best=2)
    with caplog.at_level(logging.WARNING, logger="cpkern.selection"):
        records = selection.lambda_path(ds, weights, config, L=6)
    assert any("doubled" in r.message for r in caplog.records)
    assert not np.any(records[0].fit.model.to_dense())
    assert records[0].lam > 1e-5


def test_elbow_recovers_knee():
    points = [(1, 10.0), (2, 2.0), (3, 1.9), (4, 1.8), (5, 1.7)]
    assert selection.elbow_select(points) == 2


def test_elbow_linear_curve_ties_to_smallest():
    points = [(1, 5.0), (2, 4.0), (3, 3.0), (4, 2.0), (5, 1.0)]
    assert selection.elbow_select(points) == 1
    flat = [(2, 1.0), (4, 1.0), (8, 1.0)]
    assert selection.elbow_select(flat) == 2


def test_elbow_affine_invariance():
    points = [(1, 10.0), (2, 2.0), (3, 1.9), (4, 1.8), (5, 1.7)]
    scaled = [(L, 7.5 * y + 3.0) for L, y in points]
    assert selection.elbow_select(scaled) == selection.elbow_select(points)


def test_elbow_degenerate_inputs():
    with pytest.raises(DataError):
        selection.elbow_select([(1, 2.0), (2, 1.0)])
    with pytest.raises(DataError):
        selection.elbow_select([(3, 2.0), (2, 1.0), (5, 0.5)])
    with pytest.raises(DataError):
        selection.elbow_select([(1, 2.0), (1, 1.0), (5, 0.5)])


def test_run_full_small_grid(caplog):
    ds = make_dataset(seed=81, p=5, C=2, T=2, n_cells=40, n_plaques=8)
    config = selection.SelectionConfig(
        lambda_max=1e4, max_steps=10, steps_past_best=3,
        L_grid=(4, 6, 8), R_max=3,
        solver=SolverConfig(max_outer_iters=120))
    res = selection.run_full(ds, config=config, jobs=1)

    assert res.selected_L in (4, 6, 8)
    assert [L for L, _ in res.elbow_points] == [4, 6, 8]
    assert res.excluded_L == []
    per_L = {L: [r for r in res.records if r.L == L] for L in (4, 6, 8)}
    assert all(len(v) >= 1 for v in per_L.values())
    assert sum(r.selected for r in res.records) == 1
    winner = next(r for r in res.records if r.selected)
    assert winner.selected_lambda
    assert winner.L == res.selected_L
    assert winner.lam == res.selected_lambda
    assert res.fit is winner.fit
    assert res.fit.L == res.selected_L

    if res.model.rank:
        for r in range(res.model.rank):
            for q in (res.model.q1, res.model.q2, res.model.q3):
                assert np.linalg.norm(q[:, r]) == pytest.approx(1.0)
            top = np.argmax(np.abs(res.model.q1[:, r]))
            assert res.model.q1[top, r] > 0


def test_run_full_single_L_bypasses_elbow(caplog):
    ds = make_dataset(seed=82, p=5, C=2, T=2, n_cells=40, n_plaques=8)
    config = selection.SelectionConfig(
        lambda_max=1e4, max_steps=8, steps_past_best=2, L_grid=(6,),
        R_max=3, solver=SolverConfig(max_outer_iters=120))
    with caplog.at_level(logging.WARNING, logger="cpkern.selection"):
        res = selection.run_full(ds, config=config, jobs=1)
    assert res.selected_L == 6
    assert any("elbow rule bypassed" in r.message for r in caplog.records)


def test_resolve_solver_config_rank_cap():
    ds = make_dataset(seed=83, p=5, C=2, T=2)
    cfg = selection.SelectionConfig(L_grid=(6,))
    solver_cfg = selection._resolve_solver_config(cfg, ds)
    assert solver_cfg.max_rank == 4  # C*T

    cfg2 = selection.SelectionConfig(L_grid=(6,), R_max=50)
    assert selection._resolve_solver_config(cfg2, ds).max_rank == 4

    cfg3 = selection.SelectionConfig(L_grid=(6,), R_max=2)
    assert selection._resolve_solver_config(cfg3, ds).max_rank == 2


def test_selection_config_validation():
    with pytest.raises(DataError):
        selection.SelectionConfig(lambda_max=0.0).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(decay=1.0).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(max_steps=0).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(steps_past_best=0).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(L_grid=()).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(L_grid=(3, 3)).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(L_grid=(5, 3)).validate()
    with pytest.raises(DataError):
        selection.SelectionConfig(R_max=0).validate()
    selection.SelectionConfig().validate()


def test_simulation_default_preset():
    cfg = selection.SelectionConfig.simulation_default()
    assert cfg.lambda_max == 1e10 * 0.9 ** -30
    assert cfg.L_grid == selection.SIMULATION_L_GRID
    assert cfg.R_max == 6
    over = selection.SelectionConfig.simulation_default(R_max=3)
    assert over.R_max == 3
