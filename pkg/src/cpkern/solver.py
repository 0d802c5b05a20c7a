"""Blocked coordinate descent for the penalized CP regression objective.

The objective is

    F = 1/2 * sum over stored triples of K * (y - x' beta)^2
        + (lam / (R p)) * sum_r ||q1_r||_1

where beta_{c,t} = sum_r w_r q3[t,r] q2[c,r] q1[:,r]. Because the fitted
value x' beta depends on a triple only through its cell, all block
updates collapse to per-cell aggregates:

    kappa_a = sum_j K_ja          (total kernel mass on cell a)
    psi_a   = sum_j K_ja y_j      (weighted outcome mass)
    rho_a   = psi_a - kappa_a f_a (weighted residual mass)

with f_a the current fitted value at cell a. The solver maintains f and
the per-component caches s_{a,r} = x_a' q1[:,r] incrementally and
refreshes them periodically to bound drift.
"""

import dataclasses
import logging
import math

import numpy as np

from . import backend
from ._cdcore_py import gene_coordinate_update
from .cp import CPModel, cp_als_fit, orient_signs, renormalize
from .errors import DataError, NoOverlapError, NumericalError
from .ridge import ridge_init

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class SolverConfig:
    """Knobs of the blocked descent; defaults are the stated constants."""

    lam: float | None = None
    max_rank: int | None = None
    max_outer_iters: int = 5000
    rank_drop_window: int = 500
    tol_beta: float = 1e-6
    tol_factor: float = 1e-4
    rel_weight: float = 1e-5
    q1_inf: float = 0.99
    refresh_period: int = 50
    seed: int = 0

    def validate(self):
        if self.lam is not None and not self.lam >= 0:
            raise DataError("lam must be >= 0")
        if self.max_rank is not None and self.max_rank < 1:
            raise DataError("max_rank must be >= 1")
        if self.max_outer_iters < 1:
            raise DataError("max_outer_iters must be >= 1")
        for name in ("tol_beta", "tol_factor", "rel_weight", "q1_inf"):
            if not getattr(self, name) > 0:
                raise DataError("%s must be positive" % name)
        if self.rank_drop_window < 0:
            raise DataError("rank_drop_window must be >= 0")
        if self.refresh_period < 1:
            raise DataError("refresh_period must be >= 1")


@dataclasses.dataclass
class ProblemData:
    """Flattened, immutable view of one dataset + weight set.

    Cells are the active cells only (those carrying at least one positive
    kernel weight), concatenated across samples. X is Fortran-ordered so
    gene columns are contiguous for the sweep kernel.
    """

    X: np.ndarray            # (A, p) expression of active cells
    kappa: np.ndarray        # (A,) sum of kernel weights per cell
    psi: np.ndarray          # (A,) sum of weight * outcome per cell
    ctype: np.ndarray        # (A,) cell-type codes
    time: np.ndarray         # (A,) time codes
    cells_by_type: list      # index arrays per cell-type code
    cells_by_time: list      # index arrays per time code
    trip_cell: np.ndarray    # (N*,) active-cell index per stored triple
    trip_y: np.ndarray       # (N*,) outcome per stored triple
    trip_w: np.ndarray       # (N*,) kernel weight per stored triple
    trip_sample: np.ndarray  # (N*,) sample index per stored triple
    trip_plaque: np.ndarray  # (N*,) within-sample plaque index
    n_cell_types: int
    n_times: int

    @property
    def n_cells(self):
        return self.X.shape[0]

    @property
    def n_genes(self):
        return self.X.shape[1]

    @property
    def n_triples(self):
        return self.trip_y.shape[0]


def build_problem(dataset, weights):
    """Collapse a dataset + kernel weight set into solver arrays."""
    if len(weights.blocks) != len(dataset.samples):
        raise DataError("weight set does not match the dataset samples")
    X_parts, ct_parts, tm_parts = [], [], []
    kap_parts, psi_parts = [], []
    tc_parts, ty_parts, tw_parts, ts_parts, tp_parts = [], [], [], [], []
    offset = 0
    for si, (sample, blk) in enumerate(zip(dataset.samples, weights.blocks)):
        if blk.cell_idx.size == 0:
            continue
        active = np.unique(blk.cell_idx)
        lookup = np.full(sample.cell_xy.shape[0], -1, dtype=np.int64)
        lookup[active] = np.arange(active.size, dtype=np.int64)
        local = lookup[blk.cell_idx]
        y = sample.plaque_size[blk.plaque_idx].astype(np.float64)
        w = blk.weight.astype(np.float64)
        X_parts.append(sample.expression[active])
        ct_parts.append(sample.cell_type[active])
        tm_parts.append(
            np.full(active.size, sample.time_index, dtype=np.int64))
        kap_parts.append(np.bincount(local, weights=w,
                                     minlength=active.size))
        psi_parts.append(np.bincount(local, weights=w * y,
                                     minlength=active.size))
        tc_parts.append(local + offset)
        ty_parts.append(y)
        tw_parts.append(w)
        ts_parts.append(np.full(w.size, si, dtype=np.int64))
        tp_parts.append(blk.plaque_idx.astype(np.int64))
        offset += active.size
    if not ty_parts:
        raise NoOverlapError(
            "no positive kernel weights: every plaque is isolated at the "
            "given bandwidths")
    X = np.asfortranarray(np.vstack(X_parts), dtype=np.float64)
    ctype = np.concatenate(ct_parts)
    time = np.concatenate(tm_parts)
    C = len(dataset.cell_type_labels)
    T = len(dataset.time_values)
    return ProblemData(
        X=X,
        kappa=np.concatenate(kap_parts),
        psi=np.concatenate(psi_parts),
        ctype=ctype,
        time=time,
        cells_by_type=[np.flatnonzero(ctype == c) for c in range(C)],
        cells_by_time=[np.flatnonzero(time == t) for t in range(T)],
        trip_cell=np.concatenate(tc_parts),
        trip_y=np.concatenate(ty_parts),
        trip_w=np.concatenate(tw_parts),
        trip_sample=np.concatenate(ts_parts),
        trip_plaque=np.concatenate(tp_parts),
        n_cell_types=C,
        n_times=T,
    )


@dataclasses.dataclass
class Snapshot:
    """Model parameters frozen at an iteration boundary."""

    rank: int
    beta: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    q3: np.ndarray


@dataclasses.dataclass
class SolverState:
    """Mutable descent state: model, caches, incremental residuals."""

    problem: ProblemData
    model: CPModel
    lam: float
    config: SolverConfig
    S: np.ndarray            # (A, R) cached x' q1_r, Fortran-ordered
    f: np.ndarray            # (A,) fitted values per active cell
    iteration: int = 0

    @classmethod
    def create(cls, problem, model, lam, config):
        state = cls(problem=problem, model=model.copy(), lam=lam,
                    config=config, S=None, f=None)
        state.refresh()
        return state

    @property
    def tau(self):
        R = self.model.rank
        if R == 0:
            return 0.0
        return self.lam / (R * self.problem.n_genes)

    def component_context(self, r):
        """z1 per cell: w_r q2[c,r] q3[t,r]."""
        m = self.model
        return m.w[r] * (m.q2[self.problem.ctype, r]
                         * m.q3[self.problem.time, r])

    def _z_matrix(self):
        m = self.model
        if m.rank == 0:
            return np.zeros((self.problem.n_cells, 0))
        return (m.w[np.newaxis, :] * m.q2[self.problem.ctype, :]
                * m.q3[self.problem.time, :])

    def refresh(self):
        """Recompute the caches and fitted values from the model."""
        self.S = np.asfortranarray(self.problem.X @ self.model.q1)
        self.f = np.einsum("ar,ar->a", self.S, self._z_matrix()) \
            if self.model.rank else np.zeros(self.problem.n_cells)

    def fitted_from_scratch(self):
        Z = self._z_matrix()
        if self.model.rank == 0:
            return np.zeros(self.problem.n_cells)
        return np.einsum("ar,ar->a", self.problem.X @ self.model.q1, Z)

    @property
    def residuals(self):
        """Maintained per-triple residuals y - x' beta."""
        return self.problem.trip_y - self.f[self.problem.trip_cell]

    def residuals_from_scratch(self):
        f = self.fitted_from_scratch()
        return self.problem.trip_y - f[self.problem.trip_cell]

    def weighted_loss(self):
        r = self.residuals
        return float(np.dot(self.problem.trip_w * r, r))

    def penalty(self):
        return self.tau * float(np.abs(self.model.q1).sum())

    def objective(self):
        return 0.5 * self.weighted_loss() + self.penalty()

    def snapshot(self):
        m = self.model
        return Snapshot(rank=m.rank, beta=m.to_dense(),
                        q1=m.q1.copy(), q2=m.q2.copy(), q3=m.q3.copy())


def soft_threshold(u, tau):
    """sign(u) * max(|u| - tau, 0); tau must be nonnegative."""
    if tau < 0:
        raise DataError("tau must be >= 0")
    if u > tau:
        return u - tau
    if u < -tau:
        return u + tau
    return 0.0


def update_gene_loading(state, l, r, lam=None):
    """Soft-thresholded single-coordinate update of q1[l, r].

    Returns the new coordinate. Uses the same arithmetic as the full
    sweep kernels; f, the s-cache and the model are updated in place.
    """
    p = state.problem.n_genes
    R = state.model.rank
    lam_eff = state.lam if lam is None else lam
    tau = lam_eff / (R * p) if R else 0.0
    z1 = state.component_context(r)
    gene_coordinate_update(
        state.problem.X, state.problem.kappa, state.problem.psi,
        state.f, z1, state.S[:, r], state.model.q1[:, r], l, tau)
    return float(state.model.q1[l, r])


def update_celltype_loading(state, c, r):
    """Unpenalized least-squares update of q2[c, r].

    Empty stratum or zero denominator leaves the coordinate unchanged.
    Returns the (possibly unchanged) coordinate.
    """
    prob, m = state.problem, state.model
    idx = prob.cells_by_type[c]
    if idx.size == 0:
        return float(m.q2[c, r])
    s = state.S[idx, r]
    kap = prob.kappa[idx]
    q3v = m.q3[prob.time[idx], r]
    z2 = m.w[r] * q3v * s
    den = float(np.dot(kap * z2, z2))
    if den == 0.0:
        return float(m.q2[c, r])
    z1 = m.w[r] * m.q2[c, r] * q3v
    rho = prob.psi[idx] - kap * state.f[idx]
    num = float(np.dot(z2, rho + kap * z1 * s))
    new = num / den
    delta = new - m.q2[c, r]
    if delta != 0.0:
        m.q2[c, r] = new
        state.f[idx] += z2 * delta
    return float(m.q2[c, r])


def update_time_loading(state, t, r):
    """Unpenalized least-squares update of q3[t, r]; mirrors q2."""
    prob, m = state.problem, state.model
    idx = prob.cells_by_time[t]
    if idx.size == 0:
        return float(m.q3[t, r])
    s = state.S[idx, r]
    kap = prob.kappa[idx]
    q2v = m.q2[prob.ctype[idx], r]
    z3 = m.w[r] * q2v * s
    den = float(np.dot(kap * z3, z3))
    if den == 0.0:
        return float(m.q3[t, r])
    z1 = m.w[r] * q2v * m.q3[t, r]
    rho = prob.psi[idx] - kap * state.f[idx]
    num = float(np.dot(z3, rho + kap * z1 * s))
    new = num / den
    delta = new - m.q3[t, r]
    if delta != 0.0:
        m.q3[t, r] = new
        state.f[idx] += z3 * delta
    return float(m.q3[t, r])


def update_weight(state, r):
    """Nonnegative least-squares update of w_r over all stored triples.

    Zero denominator sets the weight to 0 so pruning can remove the
    component. Returns the new weight.
    """
    prob, m = state.problem, state.model
    s = state.S[:, r]
    base = m.q2[prob.ctype, r] * m.q3[prob.time, r]
    zw = base * s
    den = float(np.dot(prob.kappa * zw, zw))
    if den == 0.0:
        new = 0.0
    else:
        rho = prob.psi - prob.kappa * state.f
        num = float(np.dot(zw, rho + prob.kappa * m.w[r] * zw))
        new = max(0.0, num / den)
    delta = new - m.w[r]
    if delta != 0.0:
        m.w[r] = new
        state.f += zw * delta
    return float(m.w[r])


def _renormalize_component(state, r):
    """Rescale component r to unit-norm factors, keeping caches in sync.

    The fitted values are invariant; only the s-cache column rescales
    with q1. A zero factor collapses the component: w = 0 and the factor
    is replaced by a basis vector so norms stay 1.
    """
    m = state.model
    a1 = float(np.linalg.norm(m.q1[:, r]))
    a2 = float(np.linalg.norm(m.q2[:, r]))
    a3 = float(np.linalg.norm(m.q3[:, r]))
    if a1 == 0.0 or a2 == 0.0 or a3 == 0.0:
        m.w[r] = 0.0
        for q, a in ((m.q1, a1), (m.q2, a2), (m.q3, a3)):
            if a == 0.0:
                q[:, r] = 0.0
                q[0, r] = 1.0
            else:
                q[:, r] /= a
        state.S[:, r] = state.problem.X[:, 0] if a1 == 0.0 \
            else state.S[:, r] / a1
        return
    m.q1[:, r] /= a1
    m.q2[:, r] /= a2
    m.q3[:, r] /= a3
    m.w[r] *= a1 * a2 * a3
    state.S[:, r] /= a1


def _resync_gene_cache(state, r, norm_before):
    """Recompute the s column after a sweep that rescaled q1 sharply.

    The incrementally maintained column keeps absolute rounding noise
    from the old scale; once the column collapses (or grows) by orders
    of magnitude that noise becomes a large relative error, and the
    unpenalized least-squares updates divide by s-scale quantities,
    amplifying it into the fitted values.
    """
    n_after = float(np.linalg.norm(state.model.q1[:, r]))
    if n_after == 0.0:
        # a fully shrunk column must yield exactly zero s, or the stale
        # cache noise defeats the zero-denominator policies downstream
        state.S[:, r] = 0.0
        return
    if norm_before <= 0.0:
        return
    ratio = n_after / norm_before
    if ratio < 1e-3 or ratio > 1e3:
        state.S[:, r] = state.problem.X @ state.model.q1[:, r]


def _block_update(state, r):
    """One full block for component r: genes, cell types, times, weight,
    then renormalization."""
    prob = state.problem
    z1 = state.component_context(r)
    norm_before = float(np.linalg.norm(state.model.q1[:, r]))
    backend.gene_sweep(prob.X, prob.kappa, prob.psi, state.f, z1,
                       state.S[:, r], state.model.q1[:, r], state.tau)
    _resync_gene_cache(state, r, norm_before)
    for c in range(prob.n_cell_types):
        update_celltype_loading(state, c, r)
    for t in range(prob.n_times):
        update_time_loading(state, t, r)
    update_weight(state, r)
    _renormalize_component(state, r)


def prune_ranks(state):
    """Drop components that are degenerate or carry negligible weight.

    A component is removed when its relative weight falls below
    rel_weight, its weight is exactly 0, or its normalized gene factor
    is concentrated on a single gene (sup norm above q1_inf). Returns
    the number of removed components; caches are rebuilt on removal.
    """
    m = state.model
    if m.rank == 0:
        return 0
    w = m.w
    total = float(w.sum())
    rel = w / total if total > 0 else np.zeros_like(w)
    sup = np.max(np.abs(m.q1), axis=0)
    drop = (rel < state.config.rel_weight) | (w == 0.0) \
        | (sup > state.config.q1_inf)
    if not drop.any():
        return 0
    keep = np.flatnonzero(~drop)
    state.model = m.drop_components(keep)
    state.refresh()
    return int(drop.sum())


def _compare_snapshots(current, previous, config):
    """Evaluate both stopping criteria between two same-rank snapshots.

    Returns (beta_change, factor_change, converged) where beta_change is
    the largest ratio of squared sup-norms over coefficient slices
    (inf when a previously-zero slice became nonzero) and factor_change
    is the largest factor-column l2 change.
    """
    beta_change = 0.0
    new, old = current.beta, previous.beta
    for c in range(new.shape[1]):
        for t in range(new.shape[2]):
            b_old = float(np.max(np.abs(old[:, c, t])))
            b_new = float(np.max(np.abs(new[:, c, t] - old[:, c, t])))
            if b_old == 0.0:
                if float(np.max(np.abs(new[:, c, t]))) > 0.0:
                    beta_change = math.inf
                continue
            beta_change = max(beta_change, (b_new * b_new) / (b_old * b_old))
    factor_change = 0.0
    for qn, qo in ((current.q1, previous.q1), (current.q2, previous.q2),
                   (current.q3, previous.q3)):
        if qn.shape[1]:
            diff = np.linalg.norm(qn - qo, axis=0)
            factor_change = max(factor_change, float(diff.max()))
    converged = (beta_change < config.tol_beta
                 and factor_change < config.tol_factor)
    return beta_change, factor_change, converged


def check_convergence(state, previous):
    """True iff both stopping criteria hold against a previous snapshot
    of the same rank."""
    if previous is None or previous.rank != state.model.rank:
        return False
    return _compare_snapshots(state.snapshot(), previous, state.config)[2]


@dataclasses.dataclass
class DescendOutcome:
    converged: bool
    collapsed: bool
    iterations: int


def descend(state, trace=None):
    """Run outer iterations on a state until convergence, collapse to
    rank 0, or the iteration cap. Appends per-iteration trace rows
    (outer_iter, rank, objective, max_beta_change, max_factor_change)."""
    cfg = state.config
    prev = None
    for it in range(1, cfg.max_outer_iters + 1):
        state.iteration = it
        for r in range(state.model.rank):
            _block_update(state, r)
        dropped = 0
        if it <= cfg.rank_drop_window:
            dropped = prune_ranks(state)
        if state.model.rank == 0:
            if trace is not None:
                trace.append((it, 0, state.objective(), math.nan, math.nan))
            return DescendOutcome(converged=False, collapsed=True,
                                  iterations=it)
        if it % cfg.refresh_period == 0:
            state.refresh()
        obj = state.objective()
        if not math.isfinite(obj):
            raise NumericalError("objective diverged (non-finite)")
        snap = state.snapshot()
        if dropped or prev is None or prev.rank != snap.rank:
            beta_ch, fac_ch, conv = math.nan, math.nan, False
        else:
            beta_ch, fac_ch, conv = _compare_snapshots(snap, prev, cfg)
        if trace is not None:
            trace.append((it, state.model.rank, obj, beta_ch, fac_ch))
        prev = None if dropped else snap
        if conv:
            return DescendOutcome(converged=True, collapsed=False,
                                  iterations=it)
    return DescendOutcome(converged=False, collapsed=False,
                          iterations=cfg.max_outer_iters)


@dataclasses.dataclass
class FitResult:
    """Fitted model with diagnostics for one (lambda, bandwidth) pair."""

    model: CPModel
    lam: float
    converged: bool
    collapsed_to_zero: bool
    n_iterations: int
    restarts: int
    trace: list
    weighted_loss: float
    n_positive: int
    seed: int
    backend: str
    residual_drift: float
    L: int | None = None

    @property
    def rank(self):
        return self.model.rank


def default_max_rank(p, C, T):
    """C*T capped by the identifiability bound min{pC, pT, CT}."""
    return max(1, min(C * T, p * C, p * T))


def fit(dataset, weights, lam, config=None, init_tensor=None,
        als_cache=None, problem=None):
    """Full blocked-descent fit at one penalty level.

    Initialization is a ridge tensor decomposed by seeded ALS at the
    starting rank; when the descent collapses to rank 0 the fit restarts
    one rank lower, down to rank 1, and an all-zero model is returned if
    every restart collapses. init_tensor and als_cache let penalty-path
    callers share the (penalty-independent) initialization work.
    """
    if config is None:
        config = SolverConfig()
    config.validate()
    if lam is None:
        lam = config.lam
    if lam is None or not lam >= 0:
        raise DataError("lam must be a nonnegative number")
    if problem is None:
        problem = build_problem(dataset, weights)
    if problem.n_triples == 0:
        raise NoOverlapError("weight set stores no positive weights")
    p, C, T = problem.n_genes, problem.n_cell_types, problem.n_times
    if init_tensor is None:
        init_tensor = ridge_init(dataset, weights)
    r_start = config.max_rank if config.max_rank is not None \
        else default_max_rank(p, C, T)
    r_start = max(1, min(r_start, p * C, p * T, C * T))
    if als_cache is None:
        als_cache = {}

    trace = []
    total_iters = 0
    restarts = 0
    outcome = None
    state = None
    for R in range(r_start, 0, -1):
        if R not in als_cache:
            als_cache[R] = cp_als_fit(init_tensor, R, seed=config.seed)
        state = SolverState.create(problem, als_cache[R], lam, config)
        outcome = descend(state, trace)
        total_iters += outcome.iterations
        if not outcome.collapsed:
            break
        restarts += 1
        logger.debug("rank collapsed at R=%d, restarting at %d", R, R - 1)

    drift = 0.0
    if state.model.rank > 0:
        scratch = state.residuals_from_scratch()
        kept = state.residuals
        drift = float(np.max(np.abs(kept - scratch)
                             / (1.0 + np.abs(scratch)))) if kept.size else 0.0
        model = state.model
    else:
        model = CPModel.zeros(p, C, T)
    renormalize(model)
    orient_signs(model)
    final = SolverState.create(problem, model, lam, config)
    return FitResult(
        model=final.model,
        lam=float(lam),
        converged=bool(outcome.converged),
        collapsed_to_zero=bool(outcome.collapsed),
        n_iterations=total_iters,
        restarts=restarts,
        trace=trace,
        weighted_loss=final.weighted_loss(),
        n_positive=problem.n_triples,
        seed=config.seed,
        backend=backend.BACKEND,
        residual_drift=drift,
    )
