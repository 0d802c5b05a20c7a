import os
import subprocess
import sys

import numpy as np
import pytest

from cpkern import _cdcore_py, backend

try:
    from cpkern import _cdcore
    HAVE_C = True
except ImportError:
    HAVE_C = False


def _random_problem(seed, A=200, p=12):
    rng = np.random.default_rng(seed)
    X = np.asfortranarray(np.exp(rng.normal(0.0, 0.5, (A, p))))
    kappa = rng.uniform(0.1, 2.0, A)
    psi = rng.normal(0.0, 3.0, A) * kappa
    q1 = np.asfortranarray(rng.normal(0.0, 0.5, (p, 3)))
    z1 = rng.normal(0.0, 0.7, A)
    s = X @ q1[:, 1]
    f = z1 * s + rng.normal(0.0, 0.1, A)
    return X, kappa, psi, f, z1, s, q1


def test_gene_coordinate_update_closed_form():
    X, kappa, psi, f, z1, s, q1 = _random_problem(0)
    l, tau = 4, 0.3
    qcol = q1[:, 1]
    g = z1 * X[:, l]
    b = float(np.dot(kappa * g, g))
    rho = psi - kappa * f
    a = float(np.dot(g, rho)) + qcol[l] * b
    expect = np.sign(a) * max(abs(a) - tau, 0.0) / b
    f2, s2, q2col = f.copy(), s.copy(), qcol.copy()
    _cdcore_py.gene_coordinate_update(X, kappa, psi, f2, z1, s2, q2col,
                                      l, tau)
    assert q2col[l] == pytest.approx(expect, rel=1e-12)
    assert np.allclose(s2, s + X[:, l] * (q2col[l] - qcol[l]), rtol=1e-12)
    assert np.allclose(f2, f + z1 * X[:, l] * (q2col[l] - qcol[l]),
                       rtol=0, atol=1e-12 * (1 + np.abs(f).max()))


def test_gene_coordinate_zero_curvature_sets_zero():
    X, kappa, psi, f, z1, s, q1 = _random_problem(1)
    X[:, 2] = 0.0
    qcol = q1[:, 0]
    qcol[2] = 0.7
    _cdcore_py.gene_coordinate_update(X, kappa, psi, f, z1, s, qcol, 2, 0.1)
    assert qcol[2] == 0.0


def test_python_sweep_reduces_objective_and_reports_max_delta():
    X, kappa, psi, f, z1, s, q1 = _random_problem(2)
    qcol = q1[:, 1].copy()
    before = qcol.copy()
    delta = _cdcore_py.gene_sweep(X, kappa, psi, f.copy(), z1, s.copy(),
                                  qcol, 0.05)
    assert delta == pytest.approx(np.abs(qcol - before).max(), rel=1e-12)


@pytest.mark.skipif(not HAVE_C, reason="compiled backend unavailable")
def test_c_matches_python_bit_tight():
    for seed in range(5):
        X, kappa, psi, f, z1, s, q1 = _random_problem(seed, A=400, p=20)
        tau = [0.0, 0.02, 0.5][seed % 3]
        fp, sp, qp = f.copy(), s.copy(), q1[:, 1].copy()
        fc, sc, qc = f.copy(), s.copy(), q1[:, 1].copy()
        dp = _cdcore_py.gene_sweep(X, kappa, psi, fp, z1, sp, qp, tau)
        dc = _cdcore.gene_sweep(X, kappa, psi, fc, z1, sc, qc, tau)
        scale = 1.0 + np.abs(qp).max()
        assert np.abs(qc - qp).max() <= 1e-10 * scale
        assert np.abs(fc - fp).max() <= 1e-9 * (1.0 + np.abs(fp).max())
        assert np.abs(sc - sp).max() <= 1e-9 * (1.0 + np.abs(sp).max())
        assert abs(dc - dp) <= 1e-10 * scale


@pytest.mark.skipif(not HAVE_C, reason="compiled backend unavailable")
def test_c_accepts_strided_column_views():
    X, kappa, psi, f, z1, s, q1 = _random_problem(3)
    Q = np.ascontiguousarray(q1[:, :2])
    col = Q[:, 1]
    assert col.strides[0] != col.itemsize
    _cdcore.gene_sweep(X, kappa, psi, f, z1, s, col, 0.1)
    assert not np.array_equal(Q[:, 1], q1[:, 1])
    assert np.array_equal(Q[:, 0], q1[:, 0])


def _backend_of(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("CPKERN_BACKEND", None)
    else:
        env["CPKERN_BACKEND"] = env_value
    return subprocess.run(
        [sys.executable, "-c",
         "from cpkern import backend; print(backend.BACKEND)"],
        capture_output=True, text=True, env=env)


def test_backend_env_selection():
    forced_py = _backend_of("python")
    assert forced_py.returncode == 0
    assert forced_py.stdout.strip() == "python"

    default = _backend_of(None)
    assert default.returncode == 0
    assert default.stdout.strip() in ("c", "python")

    bogus = _backend_of("nope")
    assert bogus.returncode != 0
    assert "CPKERN_BACKEND" in bogus.stderr


@pytest.mark.skipif(not HAVE_C, reason="compiled backend unavailable")
def test_backend_env_forced_c():
    forced = _backend_of("c")
    assert forced.returncode == 0
    assert forced.stdout.strip() == "c"


def test_module_backend_consistent():
    assert backend.BACKEND in ("c", "python")
    if HAVE_C:
        assert backend.BACKEND == "c"
