"""Synthetic data generator: square sections of gridded spots with
contiguous groups, log-normal expression, well-separated balanced plaque
sets, sparse CP-structured true coefficients, and spatially correlated
outcome noise.

Determinism contract: one replicate consumes a single seeded Generator
in a fixed draw order (true tensor, then per time point: spots, plaques,
outcomes), so a fixed seed reproduces the replicate byte for byte.
"""

import dataclasses
import json
import math

import numpy as np
from scipy.cluster.vq import kmeans2

from .cp import CPModel
from .data import Dataset, Sample
from .errors import DataError, NumericalError


@dataclasses.dataclass
class SimConfig:
    """Generator settings; the numeric defaults follow the study setup.

    spatial_corr_sd > 0 adds a smooth spatial component to log
    expression (length scale spatial_corr_length_um). Without it the
    expression field is white across spots and carries no neighborhood
    information about the unobserved plaque-site expression, so the
    misaligned regression has nothing to estimate from; 0 disables it.
    """

    n_spots_mean: float = 5000.0
    section_um: float = 1000.0
    n_groups: int = 3
    n_times: int = 2
    p: int = 50
    n_active: int = 5
    true_rank: int = 4
    n_plaques: int = 100
    sigma2_e: float = 1.0
    phi: float = 100.0
    seed: int = 0
    frac_group_genes: float = 0.2
    base_log_sd: float = 0.3
    group_shift_sd: float = 0.7
    iid_log_sd: float = 0.4
    spatial_corr_sd: float = 0.8
    spatial_corr_length_um: float = 150.0
    n_cos_features: int = 48
    jitter_frac: float = 0.9

    def validate(self):
        if self.n_active > self.p:
            raise DataError("n_active must be <= p")
        if min(self.p, self.n_active, self.true_rank, self.n_groups,
               self.n_times, self.n_plaques) < 1:
            raise DataError("counts must be >= 1")
        if not self.phi > 0:
            raise DataError("phi must be positive")
        if self.sigma2_e < 0:
            raise DataError("sigma2_e must be >= 0")
        if not self.n_spots_mean > 0 or not self.section_um > 0:
            raise DataError("n_spots_mean and section_um must be positive")
        if not 0 <= self.frac_group_genes <= 1:
            raise DataError("frac_group_genes must lie in [0, 1]")
        if self.spatial_corr_sd < 0 or self.iid_log_sd < 0:
            raise DataError("noise scales must be >= 0")


def _gene_params(config):
    """Gene-level parameters shared by every sample of a replicate.

    Drawn from a child stream keyed only by the config seed so all
    samples see the same panel semantics.
    """
    rng = np.random.default_rng([config.seed, 0x67656E65])
    base = rng.normal(0.0, config.base_log_sd, config.p)
    n_shift = int(round(config.frac_group_genes * config.p))
    shift_genes = np.sort(rng.choice(config.p, size=n_shift, replace=False)) \
        if n_shift else np.empty(0, dtype=np.int64)
    shifts = rng.normal(0.0, config.group_shift_sd,
                        (config.n_groups, n_shift))
    return base, shift_genes, shifts


def _spatial_groups(coords, k, rng):
    """K-means grouping into k contiguous regions, labels ordered by
    centroid (x, then y) so group identities are stable."""
    for attempt in range(5):
        centers, labels = kmeans2(coords, k, minit="++", seed=rng)
        counts = np.bincount(labels, minlength=k)
        if counts.min() > 0:
            order = np.lexsort((centers[:, 1], centers[:, 0]))
            relabel = np.empty(k, dtype=np.int64)
            relabel[order] = np.arange(k)
            return relabel[labels]
    raise DataError("could not form %d non-empty spatial groups" % k)


def generate_sample(config, sample_index, rng):
    """One square section: jittered-grid coordinates, contiguous group
    labels, and log-normal expression.

    Returns (coords (n,2), groups (n,), expression (n,p)).
    """
    config.validate()
    n = int(rng.poisson(config.n_spots_mean))
    n = max(n, config.n_groups)
    g = int(math.ceil(math.sqrt(n)))
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    centers = (np.stack([ii.ravel(), jj.ravel()], axis=1) + 0.5) / g
    chosen = np.sort(rng.choice(g * g, size=n, replace=False))
    pts = centers[chosen]
    pts = pts + rng.uniform(-0.5, 0.5, size=pts.shape) \
        * (config.jitter_frac / g)
    coords = np.clip(pts, 0.0, 1.0) * config.section_um
    groups = _spatial_groups(coords, config.n_groups, rng)

    base, shift_genes, shifts = _gene_params(config)
    log_expr = np.tile(base, (n, 1))
    if shift_genes.size:
        log_expr[:, shift_genes] += shifts[groups, :]
    if config.spatial_corr_sd > 0:
        k = config.n_cos_features
        omega = rng.normal(0.0, 1.0 / config.spatial_corr_length_um,
                           (config.p, k, 2))
        phase = rng.uniform(0.0, 2.0 * np.pi, (config.p, k))
        amp = config.spatial_corr_sd * math.sqrt(2.0 / k)
        # field_g(s) = amp * sum_k cos(omega_gk . s + phase_gk)
        proj = np.einsum("nd,pkd->npk", coords, omega)
        log_expr += amp * np.cos(proj + phase[np.newaxis]).sum(axis=2)
    if config.iid_log_sd > 0:
        log_expr += rng.normal(0.0, config.iid_log_sd, (n, config.p))
    return coords, groups, np.exp(log_expr)


def select_plaques(sample_coords, groups, M, rng):
    """Greedy farthest-point plaque selection, balanced across groups.

    Group quotas differ by at most one (extras go to the smallest group
    indices). Within each group the first pick is uniform at random and
    the rest maximize the minimum distance to already-picked plaques
    (ties toward the smaller spot index). Returns sorted spot indices.
    """
    C = int(groups.max()) + 1
    n = sample_coords.shape[0]
    if M > n:
        raise DataError("cannot place %d plaques among %d spots" % (M, n))
    if M < C:
        raise DataError("need at least one plaque per group (M >= %d)" % C)
    quota, extra = divmod(M, C)
    picked = []
    for c in range(C):
        want = quota + (1 if c < extra else 0)
        idx = np.flatnonzero(groups == c)
        if idx.size < want:
            raise DataError(
                "group %d has %d spots, cannot place %d plaques"
                % (c, idx.size, want))
        pts = sample_coords[idx]
        first = int(rng.integers(idx.size))
        chosen = [first]
        mind = np.linalg.norm(pts - pts[first], axis=1)
        for _ in range(want - 1):
            nxt = int(np.argmax(mind))
            chosen.append(nxt)
            mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
        picked.extend(idx[chosen])
    return np.sort(np.asarray(picked, dtype=np.int64))


def generate_true_beta(config, rng):
    """Sparse raw CP truth: n_active shared nonzero gene rows, dense
    group and time factors, unit component weights (not normalized)."""
    config.validate()
    p, C, T, R = config.p, config.n_groups, config.n_times, config.true_rank
    active = np.sort(rng.choice(p, size=config.n_active, replace=False))
    q1 = np.zeros((p, R))
    q1[active, :] = rng.normal(0.0, 2.0, (config.n_active, R))
    q2 = rng.normal(5.0, 2.0, (C, R))
    q3 = rng.normal(0.0, 0.5, (T, R))
    model = CPModel(w=np.ones(R), q1=q1, q2=q2, q3=q3)
    return model, model.to_dense(), active


def generate_outcomes(plaque_coords, plaque_expr, plaque_groups,
                      true_beta, time_index, sigma2_e, phi, rng):
    """y = plaque-site expression dotted with its (group, time) slice,
    plus N(0, sigma2_e * exp(-d/phi)) spatial noise."""
    if not phi > 0:
        raise DataError("phi must be positive")
    if sigma2_e < 0:
        raise DataError("sigma2_e must be >= 0")
    M = plaque_coords.shape[0]
    mean = np.einsum("jp,jp->j", plaque_expr,
                     true_beta[:, plaque_groups, time_index].T)
    if sigma2_e == 0:
        return mean
    d = np.linalg.norm(plaque_coords[:, np.newaxis, :]
                       - plaque_coords[np.newaxis, :, :], axis=2)
    cov = sigma2_e * np.exp(-d / phi)
    z = rng.standard_normal(M)
    jitter = 1e-10
    while True:
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(M))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > 1e-6:
                raise NumericalError(
                    "noise covariance factorization failed at jitter 1e-6")
    return mean + chol @ z


@dataclasses.dataclass
class SimTruth:
    """A generated replicate: dataset plus everything that made it."""

    dataset: Dataset
    true_model: CPModel
    true_beta: np.ndarray
    active_genes: np.ndarray
    noise: list
    config: SimConfig


def generate_replicate(config, rng=None):
    """Compose truth, per-time samples, plaques and outcomes into a
    SimTruth whose dataset has plaque spots removed from the predictors."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    true_model, true_beta, active = generate_true_beta(config, rng)
    samples = []
    noise = []
    for i in range(config.n_times):
        sid = "s%d" % i
        coords, groups, expr = generate_sample(config, i, rng)
        pl = select_plaques(coords, groups, config.n_plaques, rng)
        mean_only = generate_outcomes(coords[pl], expr[pl], groups[pl],
                                      true_beta, i, 0.0, config.phi, rng)
        y = generate_outcomes(coords[pl], expr[pl], groups[pl], true_beta,
                              i, config.sigma2_e, config.phi, rng)
        noise.append(y - mean_only)
        keep = np.setdiff1d(np.arange(coords.shape[0]), pl)
        samples.append(Sample(
            sample_id=sid,
            time_index=i,
            time_value=float(i + 1),
            plaque_ids=["%s_p%03d" % (sid, j) for j in range(pl.size)],
            plaque_xy=coords[pl],
            plaque_size=y,
            cell_ids=["%s_c%05d" % (sid, k) for k in range(keep.size)],
            cell_xy=coords[keep],
            cell_type=groups[keep].astype(np.int64),
            expression=expr[keep],
        ))
    dataset = Dataset(
        samples=samples,
        gene_ids=["gene_%03d" % g for g in range(config.p)],
        cell_type_labels=["group_%d" % c for c in range(config.n_groups)],
        time_values=[float(i + 1) for i in range(config.n_times)],
    )
    dataset.validate()
    return SimTruth(dataset=dataset, true_model=true_model,
                    true_beta=true_beta, active_genes=active,
                    noise=noise, config=config)


def truth_payload(truth):
    """JSON-ready dict with the dense truth, CP factors, and config."""
    m = truth.true_model
    return {
        "config": dataclasses.asdict(truth.config),
        "seed": truth.config.seed,
        "active_genes": [int(g) for g in truth.active_genes],
        "true_beta": [[[float(v) for v in ct] for ct in sl]
                      for sl in truth.true_beta],
        "cp": {
            "w": [float(v) for v in m.w],
            "q1": [[float(v) for v in row] for row in m.q1],
            "q2": [[float(v) for v in row] for row in m.q2],
            "q3": [[float(v) for v in row] for row in m.q3],
        },
        "shape": {"p": truth.config.p, "C": truth.config.n_groups,
                  "T": truth.config.n_times},
    }


def write_truth(truth, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth_payload(truth), fh, indent=1, sort_keys=True)
        fh.write("\n")
