"""Shared fixtures-in-code: small deterministic datasets and states."""

import numpy as np

from cpkern.data import Dataset, Sample
from cpkern.cp import CPModel
from cpkern.kernels import compute_weights
from cpkern.solver import SolverConfig, SolverState, build_problem


def make_dataset(seed, p=8, C=3, T=2, n_cells=60, n_plaques=12,
                 section=100.0):
    """Random but reproducible dataset built directly from arrays.

    One sample per time point; every cell type occurs in every sample.
    """
    rng = np.random.default_rng(seed)
    samples = []
    for t in range(T):
        cxy = rng.uniform(0.0, section, (n_cells, 2))
        ct = rng.integers(0, C, n_cells)
        ct[:C] = np.arange(C)
        expr = np.exp(rng.normal(0.0, 0.5, (n_cells, p)))
        pxy = rng.uniform(0.0, section, (n_plaques, 2))
        y = rng.normal(0.0, 2.0, n_plaques)
        sid = "s%d" % t
        samples.append(Sample(
            sample_id=sid,
            time_index=t,
            time_value=float(t + 1),
            plaque_ids=["%s_p%02d" % (sid, j) for j in range(n_plaques)],
            plaque_xy=pxy,
            plaque_size=y,
            cell_ids=["%s_c%03d" % (sid, k) for k in range(n_cells)],
            cell_xy=cxy,
            cell_type=ct.astype(np.int64),
            expression=expr,
        ))
    ds = Dataset(samples=samples,
                 gene_ids=["g%02d" % i for i in range(p)],
                 cell_type_labels=["ct%d" % c for c in range(C)],
                 time_values=[float(t + 1) for t in range(T)])
    return ds.validate()


def make_weights(dataset, frac=0.4):
    """Kernel weights at a bandwidth wide enough to cover many pairs."""
    span = max(float(s.cell_xy.max()) for s in dataset.samples)
    h = np.full(dataset.n_samples, span * frac)
    return compute_weights(dataset, h)


def random_model(rng, p, C, T, R, scale=0.5):
    return CPModel(w=np.abs(rng.normal(1.0, 0.3, R)),
                   q1=rng.normal(0.0, scale, (p, R)),
                   q2=rng.normal(0.0, scale, (C, R)),
                   q3=rng.normal(0.0, scale, (T, R)))


def make_state(seed, p=8, C=3, T=2, R=3, lam=1.0, n_cells=60, n_plaques=12,
               **config_kwargs):
    """Problem + solver state around a random model; returns (state, ds)."""
    ds = make_dataset(seed, p=p, C=C, T=T, n_cells=n_cells,
                      n_plaques=n_plaques)
    weights = make_weights(ds)
    problem = build_problem(ds, weights)
    rng = np.random.default_rng(seed + 1)
    model = random_model(rng, p, C, T, R)
    config = SolverConfig(**config_kwargs)
    state = SolverState.create(problem, model, lam, config)
    return state, ds, weights


def canonical_objective(state):
    """Objective evaluated at the unit-norm representative of the model.

    The model class constrains factor columns to unit l2 norm, so the
    objective is compared across rescaling steps at that representative:
    the loss comes from the maintained fitted values (rescaling must not
    move them) and the penalty from the renormalized copy.
    """
    from cpkern import cp
    m = state.model.copy()
    cp.renormalize(m)
    return 0.5 * state.weighted_loss() + state.tau * float(np.abs(m.q1).sum())


def descent_audit(state):
    """One full block cycle, checking F after every coordinate update.

    Returns (max_update_increase, max_renorm_change, max_renorm_slice),
    all already divided by their (1 + scale) normalizers: updates against
    1+|F|, the renormalization objective change against 1+|F_canonical|,
    and the renormalization tensor change against 1+max|beta|.
    """
    from cpkern import solver
    prob = state.problem
    max_up = -np.inf
    max_renorm = 0.0
    max_slice = 0.0
    F = state.objective()
    for r in range(state.model.rank):
        norm_before = float(np.linalg.norm(state.model.q1[:, r]))
        for l in range(prob.n_genes):
            solver.update_gene_loading(state, l, r)
            F2 = state.objective()
            max_up = max(max_up, (F2 - F) / (1.0 + abs(F)))
            F = F2
        solver._resync_gene_cache(state, r, norm_before)
        for c in range(prob.n_cell_types):
            solver.update_celltype_loading(state, c, r)
            F2 = state.objective()
            max_up = max(max_up, (F2 - F) / (1.0 + abs(F)))
            F = F2
        for t in range(prob.n_times):
            solver.update_time_loading(state, t, r)
            F2 = state.objective()
            max_up = max(max_up, (F2 - F) / (1.0 + abs(F)))
            F = F2
        solver.update_weight(state, r)
        F2 = state.objective()
        max_up = max(max_up, (F2 - F) / (1.0 + abs(F)))
        Fc0 = canonical_objective(state)
        B0 = state.model.to_dense()
        solver._renormalize_component(state, r)
        Fc1 = canonical_objective(state)
        B1 = state.model.to_dense()
        max_renorm = max(max_renorm, abs(Fc1 - Fc0) / (1.0 + abs(Fc0)))
        max_slice = max(max_slice, float(np.max(np.abs(B1 - B0)))
                        / (1.0 + float(np.max(np.abs(B0)))))
        F = state.objective()
    return max_up, max_renorm, max_slice


def subobjective(state, mode, index):
    """The full objective as a function of one coordinate.

    Every evaluation rebuilds fitted values from scratch on a frozen
    model copy, so the returned callable is independent of the solver's
    incremental bookkeeping.
    """
    prob, lam, config = state.problem, state.lam, state.config
    base = state.model.copy()

    def F(x):
        m = base.copy()
        if mode == "gene":
            l, r = index
            m.q1[l, r] = x
        elif mode == "celltype":
            c, r = index
            m.q2[c, r] = x
        elif mode == "time":
            t, r = index
            m.q3[t, r] = x
        elif mode == "weight":
            (r,) = index
            m.w[r] = x
        else:
            raise ValueError(mode)
        st = SolverState.create(prob, m, lam, config)
        return st.objective()

    return F


def oracle_argmin(F, lo, hi, coarse=81, xatol=1e-10):
    """Grid scan bracketing followed by bounded golden-section polish."""
    import scipy.optimize
    xs = np.linspace(lo, hi, coarse)
    vals = np.array([F(float(x)) for x in xs])
    i = int(np.argmin(vals))
    a = float(xs[max(0, i - 1)])
    b = float(xs[min(coarse - 1, i + 1)])
    res = scipy.optimize.minimize_scalar(
        F, bounds=(a, b), method="bounded",
        options={"xatol": xatol, "maxiter": 500})
    if res.fun <= vals[i]:
        return float(res.x)
    return float(xs[i])


def apply_update(state, mode, index):
    """Run one solver block update; returns the new coordinate value."""
    from cpkern import solver
    if mode == "gene":
        l, r = index
        return solver.update_gene_loading(state, l, r)
    if mode == "celltype":
        c, r = index
        return solver.update_celltype_loading(state, c, r)
    if mode == "time":
        t, r = index
        return solver.update_time_loading(state, t, r)
    (r,) = index
    return solver.update_weight(state, r)
