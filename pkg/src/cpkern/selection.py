"""Penalty-path construction, BIC-style selection, and the elbow rule.

Orchestrates the full pipeline: for every neighborhood size L, build
kernel weights, descend a geometric penalty path (each fit initialized
from ridge + seeded ALS, never warm-started), pick the penalty by the
BIC-style criterion, then pick L by the elbow of the normalized-loss
curve.
"""

import concurrent.futures
import dataclasses
import logging
import math

import numpy as np

from .cp import CPModel
from .errors import DataError, NumericalError
from .kernels import bandwidth_candidates, compute_weights
from .ridge import ridge_init
from .solver import (SolverConfig, build_problem, default_max_rank, fit)

logger = logging.getLogger(__name__)

NONZERO_TOL = 1e-12
REAL_DATA_L_GRID = tuple(range(1, 21)) + (25, 30)
SIMULATION_L_GRID = (5, 10, 12, 15, 20, 25, 30, 35, 40, 45, 50, 70)


@dataclasses.dataclass
class SelectionConfig:
    """Path and grid settings; defaults mirror the real-data analysis."""

    lambda_max: float = 1e5
    decay: float = 0.9
    max_steps: int = 60
    steps_past_best: int = 5
    L_grid: tuple = REAL_DATA_L_GRID
    R_max: int | None = None
    solver: SolverConfig = dataclasses.field(default_factory=SolverConfig)
    max_doublings: int = 60

    def validate(self):
        if not self.lambda_max > 0:
            raise DataError("lambda_max must be positive")
        if not 0 < self.decay < 1:
            raise DataError("decay must lie in (0, 1)")
        if self.max_steps < 1:
            raise DataError("max_steps must be >= 1")
        if self.steps_past_best < 1:
            raise DataError("steps_past_best must be >= 1")
        if len(self.L_grid) == 0:
            raise DataError("L_grid must be non-empty")
        if list(self.L_grid) != sorted(set(self.L_grid)):
            raise DataError("L_grid must be strictly ascending")
        if self.R_max is not None and self.R_max < 1:
            raise DataError("R_max must be >= 1")
        self.solver.validate()

    @classmethod
    def simulation_default(cls, **overrides):
        """Grid and penalty ceiling used for the synthetic study."""
        base = dict(lambda_max=1e10 * 0.9 ** -30,
                    L_grid=SIMULATION_L_GRID, R_max=6)
        base.update(overrides)
        return cls(**base)


def count_nonzero_factors(model, tol=NONZERO_TOL):
    """Entries with magnitude above tol across the three factor matrices
    (the component weights are not counted)."""
    return int(sum((np.abs(q) > tol).sum()
                   for q in (model.q1, model.q2, model.q3)))


def bic_criterion(fit_result, weights):
    """N* log(mean weighted squared residual) + nu log N*."""
    n_star = weights.n_positive
    if n_star <= 0:
        raise DataError("criterion undefined without positive weights")
    loss = fit_result.weighted_loss
    nu = count_nonzero_factors(fit_result.model)
    if loss <= 0.0:
        logger.warning("suspicious perfect fit (zero weighted loss) at "
                       "lambda=%g", fit_result.lam)
        return -math.inf
    return n_star * math.log(loss / n_star) + nu * math.log(n_star)


def normalized_loss(fit_result, weights):
    """Weighted mean squared residual, the elbow curve's y-axis."""
    n_star = weights.n_positive
    if n_star <= 0:
        raise DataError("normalized loss undefined without positive weights")
    return fit_result.weighted_loss / n_star


@dataclasses.dataclass
class PathRecord:
    """One evaluated (L, lambda) grid point."""

    L: int
    lam: float
    fit: object
    bic: float
    nu: int
    n_star: int
    normalized_loss: float
    selected_lambda: bool = False
    selected: bool = False


@dataclasses.dataclass
class PathResult:
    """Everything run_full produced: grid records and the final choice."""

    records: list
    selected_L: int
    selected_lambda: float
    model: CPModel
    fit: object
    bandwidths: object
    elbow_points: list
    excluded_L: list


def _resolve_solver_config(config, dataset):
    p = len(dataset.gene_ids)
    C = len(dataset.cell_type_labels)
    T = len(dataset.time_values)
    r_max = config.R_max if config.R_max is not None \
        else default_max_rank(p, C, T)
    r_max = max(1, min(r_max, p * C, p * T, C * T))
    return dataclasses.replace(config.solver, max_rank=r_max)


def _is_all_zero(fit_result):
    return fit_result.model.rank == 0 or \
        not np.any(fit_result.model.to_dense())


def _fit_at(dataset, weights, lam, solver_cfg, init_tensor, als_cache,
            problem):
    try:
        return fit(dataset, weights, lam, config=solver_cfg,
                   init_tensor=init_tensor, als_cache=als_cache,
                   problem=problem)
    except NumericalError as exc:
        raise NumericalError("lambda=%g: %s" % (lam, exc)) from exc


def lambda_path(dataset, weights, config, L=None):
    """Descend the geometric penalty path and record the criterion.

    The starting penalty is verified to give the all-zero solution and
    doubled (with a warning) until it does. Successive penalties are the
    floating product lam * decay. The path stops once steps_past_best
    penalties have been evaluated beyond the current criterion minimizer
    (ties broken toward the latest) or at max_steps.
    """
    config.validate()
    solver_cfg = _resolve_solver_config(config, dataset)
    problem = build_problem(dataset, weights)
    init_tensor = ridge_init(dataset, weights)
    als_cache = {}

    lam_max = float(config.lambda_max)
    first = _fit_at(dataset, weights, lam_max, solver_cfg, init_tensor,
                    als_cache, problem)
    doublings = 0
    while not _is_all_zero(first):
        doublings += 1
        if doublings > config.max_doublings:
            raise NumericalError(
                "lambda_max did not reach the all-zero solution after "
                "%d doublings" % config.max_doublings)
        lam_max *= 2.0
        logger.warning("lambda_max doubled to %g: previous value did not "
                       "yield the all-zero solution", lam_max)
        first = _fit_at(dataset, weights, lam_max, solver_cfg, init_tensor,
                        als_cache, problem)

    records = []
    bics = []
    lam = lam_max
    fit_result = first
    for step in range(config.max_steps):
        if step > 0:
            fit_result = _fit_at(dataset, weights, lam, solver_cfg,
                                 init_tensor, als_cache, problem)
        if fit_result.L is None:
            fit_result.L = L
        bic = bic_criterion(fit_result, weights)
        records.append(PathRecord(
            L=L, lam=lam, fit=fit_result, bic=bic,
            nu=count_nonzero_factors(fit_result.model),
            n_star=weights.n_positive,
            normalized_loss=normalized_loss(fit_result, weights)))
        bics.append(bic)
        # ties toward the latest index keep the path moving through the
        # all-zero plateau at the top of the path
        best = max(range(len(bics)), key=lambda i: (-bics[i], i))
        if len(bics) - 1 - best >= config.steps_past_best:
            break
        lam = lam * config.decay
    best = min(range(len(bics)), key=lambda i: (bics[i], i))
    records[best].selected_lambda = True
    return records


def elbow_select(points):
    """L maximizing perpendicular distance to the endpoint chord.

    Both axes are affinely rescaled to [0, 1] first; ties break toward
    the smaller L. Fewer than 3 points is a degenerate curve.
    """
    if len(points) < 3:
        raise DataError("elbow rule needs at least 3 points, got %d"
                        % len(points))
    Ls = [p[0] for p in points]
    ys = [p[1] for p in points]
    if Ls != sorted(set(Ls)):
        raise DataError("elbow points must have strictly ascending L")
    x = np.asarray(Ls, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    xr = (x - x[0]) / (x[-1] - x[0])
    span = y.max() - y.min()
    yr = (y - y.min()) / span if span > 0 else np.zeros_like(y)
    a, b = yr[0], yr[-1]
    dist = np.abs(a - yr + xr * (b - a)) / math.sqrt(1.0 + (b - a) ** 2)
    best = 0
    for i in range(1, len(points)):
        if dist[i] > dist[best]:
            best = i
    return Ls[best]


def _path_for_L(args):
    dataset, L, bandwidths, config = args
    weights = compute_weights(dataset, bandwidths)
    if weights.n_positive == 0:
        return L, None
    return L, lambda_path(dataset, weights, config, L=L)


def run_full(dataset, config=None, jobs=None):
    """Full pipeline: per-L penalty paths, per-L selection, elbow over L.

    Returns a PathResult whose model is the fit at the selected
    (penalty, L) pair. L values whose weight sets are empty are dropped
    from the elbow curve with a warning; losing every L is fatal.
    """
    if config is None:
        config = SelectionConfig()
    config.validate()
    table = bandwidth_candidates(dataset, list(config.L_grid))
    job_args = [(dataset, L, table.column(L), config)
                for L in config.L_grid]
    results = {}
    if jobs is not None and jobs > 1 and len(job_args) > 1:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=min(jobs, len(job_args))) as pool:
            for L, recs in pool.map(_path_for_L, job_args):
                results[L] = recs
    else:
        for args in job_args:
            L, recs = _path_for_L(args)
            results[L] = recs

    records = []
    elbow_points = []
    excluded = []
    per_L_best = {}
    for L in config.L_grid:
        recs = results[L]
        if recs is None:
            excluded.append(L)
            logger.warning("L=%d excluded: no positive kernel weights", L)
            continue
        records.extend(recs)
        best = next(r for r in recs if r.selected_lambda)
        per_L_best[L] = best
        elbow_points.append((L, best.normalized_loss))
    if not elbow_points:
        raise NumericalError("every L produced an empty weight set")

    if len(elbow_points) >= 3:
        selected_L = elbow_select(elbow_points)
    else:
        selected_L = min(elbow_points, key=lambda p: (p[1], p[0]))[0]
        logger.warning("elbow rule bypassed with %d usable L value(s); "
                       "selected L=%d by smallest normalized loss",
                       len(elbow_points), selected_L)
    chosen = per_L_best[selected_L]
    chosen.selected = True
    chosen.fit.L = selected_L
    return PathResult(
        records=records,
        selected_L=selected_L,
        selected_lambda=chosen.lam,
        model=chosen.fit.model,
        fit=chosen.fit,
        bandwidths=table,
        elbow_points=elbow_points,
        excluded_L=excluded,
    )
