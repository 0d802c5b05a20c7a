"""CP-factorized coefficient tensor over genes x cell types x times.

A rank-R model stores nonnegative component weights w and three factor
matrices q1 (p x R), q2 (C x R), q3 (T x R); the dense coefficient tensor
is B[l, c, t] = sum_r w_r q1[l, r] q2[c, r] q3[t, r]. R = 0 is the valid
all-zero tensor. The ALS fitter here is used only to initialize the
coordinate-descent solver.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError


@dataclass
class CPModel:
    w: np.ndarray    # (R,)
    q1: np.ndarray   # (p, R) gene factors
    q2: np.ndarray   # (C, R) cell-type factors
    q3: np.ndarray   # (T, R) time factors

    @property
    def rank(self):
        return len(self.w)

    @property
    def shape(self):
        return (self.q1.shape[0], self.q2.shape[0], self.q3.shape[0])

    @classmethod
    def zeros(cls, p, C, T, rank=0):
        return cls(w=np.zeros(rank),
                   q1=np.zeros((p, rank)),
                   q2=np.zeros((C, rank)),
                   q3=np.zeros((T, rank)))

    def copy(self):
        return CPModel(self.w.copy(), self.q1.copy(),
                       self.q2.copy(), self.q3.copy())

    def beta_slice(self, c, t):
        """Coefficient vector for one (cell type, time): length p."""
        if self.rank == 0:
            return np.zeros(self.q1.shape[0])
        return self.q1 @ (self.w * self.q2[c, :] * self.q3[t, :])

    def to_dense(self):
        """Dense p x C x T reconstruction."""
        p, C, T = self.shape
        if self.rank == 0:
            return np.zeros((p, C, T))
        return np.einsum("r,lr,cr,tr->lct", self.w, self.q1, self.q2, self.q3)

    def drop_components(self, keep):
        """New model restricted to the kept component indices (in order)."""
        keep = np.asarray(keep, dtype=np.int64)
        return CPModel(self.w[keep], self.q1[:, keep],
                       self.q2[:, keep], self.q3[:, keep])


def renormalize(model):
    """Rescale factors to unit l2 norm, absorbing scale into w (in place).

    Components with a zero-norm factor are zeroed (w_r = 0) and the
    degenerate factor is replaced by the first basis vector so the
    unit-norm invariant holds; negative w (possible from ALS) is absorbed
    by flipping the time factor. Reconstruction is unchanged.
    """
    for r in range(model.rank):
        if model.w[r] < 0:
            model.w[r] = -model.w[r]
            model.q3[:, r] = -model.q3[:, r]
        alphas = [float(np.linalg.norm(f[:, r]))
                  for f in (model.q1, model.q2, model.q3)]
        if min(alphas) == 0.0:
            model.w[r] = 0.0
            for f, a in zip((model.q1, model.q2, model.q3), alphas):
                if a == 0.0:
                    f[:, r] = 0.0
                    f[0, r] = 1.0
                else:
                    f[:, r] /= a
        else:
            a1, a2, a3 = alphas
            model.q1[:, r] /= a1
            model.q2[:, r] /= a2
            model.q3[:, r] /= a3
            model.w[r] *= a1 * a2 * a3
    return model


def orient_signs(model):
    """Flip signs so each component's top-|loading| gene entry is positive.

    Flips q1 and q3 together (reconstruction unchanged, w stays >= 0).
    Ties for the top gene resolve to the smallest index.
    """
    for r in range(model.rank):
        top = int(np.argmax(np.abs(model.q1[:, r])))
        if model.q1[top, r] < 0:
            model.q1[:, r] = -model.q1[:, r]
            model.q3[:, r] = -model.q3[:, r]
    return model


# === ALS initialization fitter ===

def cp_als_fit(dense_tensor, R, max_iters=500, tol=1e-10, seed=0):
    """Alternating least squares CP fit of a dense p x C x T tensor.

    Parameters
    ----------
    dense_tensor : ndarray (p, C, T)
    R : int >= 1
        Number of components.
    max_iters : int
        Outer ALS sweeps.
    tol : float
        Stop when the relative reconstruction error improves by less
        than tol between sweeps.
    seed : int
        Seed for the random factor initialization.

    Returns
    -------
    CPModel
        Normalized (unit factors, w >= 0); components whose weight
        collapses to 0 are retained at zero.
    """
    B = np.asarray(dense_tensor, dtype=np.float64)
    if B.ndim != 3:
        raise DataError(f"expected a 3-way tensor, got shape {B.shape}")
    if not np.all(np.isfinite(B)):
        raise DataError("tensor has non-finite entries")
    if int(R) != R or R < 1:
        raise DataError(f"rank must be a positive integer, got {R!r}")
    R = int(R)
    p, C, T = B.shape

    rng = np.random.default_rng(seed)
    A1 = rng.standard_normal((p, R))
    A2 = rng.standard_normal((C, R))
    A3 = rng.standard_normal((T, R))

    normB = float(np.linalg.norm(B))
    if normB == 0.0:
        m = CPModel(w=np.zeros(R), q1=np.zeros((p, R)),
                    q2=np.zeros((C, R)), q3=np.zeros((T, R)))
        return renormalize(m)

    B1 = B.reshape(p, C * T)                       # unfold mode 1: (c,t) cols
    B2 = np.moveaxis(B, 1, 0).reshape(C, p * T)    # mode 2
    B3 = np.moveaxis(B, 2, 0).reshape(T, p * C)    # mode 3

    prev_err = None
    for _ in range(max_iters):
        # mode-m solve: A_m = B_(m) Z (gram)^-1 with Z the Khatri-Rao of
        # the other two factors; tiny ridge keeps the gram invertible
        G = (A2.T @ A2) * (A3.T @ A3)
        A1 = np.linalg.solve(G + 1e-12 * np.eye(R),
                             (B1 @ _kr_cols(A2, A3)).T).T
        G = (A1.T @ A1) * (A3.T @ A3)
        A2 = np.linalg.solve(G + 1e-12 * np.eye(R),
                             (B2 @ _kr_cols_mode2(A1, A3)).T).T
        G = (A1.T @ A1) * (A2.T @ A2)
        A3 = np.linalg.solve(G + 1e-12 * np.eye(R),
                             (B3 @ _kr_cols_mode3(A1, A2)).T).T

        approx = np.einsum("lr,cr,tr->lct", A1, A2, A3)
        err = float(np.linalg.norm(B - approx)) / normB
        if prev_err is not None and abs(prev_err - err) < tol:
            break
        prev_err = err

    m = CPModel(w=np.ones(R), q1=A1, q2=A2, q3=A3)
    return renormalize(m)


def _kr_cols(A2, A3):
    # design for the mode-1 unfolding with columns ordered (c, t):
    # column index c*T + t pairs q2[c, r] with q3[t, r]
    C, R = A2.shape
    T = A3.shape[0]
    return (A2[:, None, :] * A3[None, :, :]).reshape(C * T, R)


def _kr_cols_mode2(A1, A3):
    # mode-2 unfolding of moveaxis(B, 1, 0): columns ordered (l, t)
    p, R = A1.shape
    T = A3.shape[0]
    return (A1[:, None, :] * A3[None, :, :]).reshape(p * T, R)


def _kr_cols_mode3(A1, A2):
    # mode-3 unfolding of moveaxis(B, 2, 0): columns ordered (l, c)
    p, R = A1.shape
    C = A2.shape[0]
    return (A1[:, None, :] * A2[None, :, :]).reshape(p * C, R)


# === serialization ===

def model_to_json(model, gene_ids, cell_type_labels, time_values, seed,
                  extra=None):
    """Serialize to a JSON string; floats round-trip exactly (repr)."""
    payload = {
        "rank": int(model.rank),
        "w": [float(v) for v in model.w],
        "q1": [[float(v) for v in row] for row in model.q1],
        "q2": [[float(v) for v in row] for row in model.q2],
        "q3": [[float(v) for v in row] for row in model.q3],
        "gene_ids": list(gene_ids),
        "cell_type_labels": list(cell_type_labels),
        "time_values": [float(v) for v in time_values],
        "seed": int(seed),
    }
    if extra:
        payload.update(extra)
    return json.dumps(payload, indent=1, sort_keys=True)


def model_from_json(text):
    """Inverse of model_to_json; returns (CPModel, metadata dict)."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid model JSON: {exc}")
    try:
        rank = int(payload["rank"])
        q1 = np.asarray(payload["q1"], dtype=np.float64)
        q2 = np.asarray(payload["q2"], dtype=np.float64)
        q3 = np.asarray(payload["q3"], dtype=np.float64)
        w = np.asarray(payload["w"], dtype=np.float64)
        meta = {"gene_ids": list(payload["gene_ids"]),
                "cell_type_labels": list(payload["cell_type_labels"]),
                "time_values": [float(v) for v in payload["time_values"]],
                "seed": int(payload["seed"])}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"invalid model JSON: {exc}")
    if w.shape != (rank,):
        raise DataError("model JSON: w length disagrees with rank")
    for name, f, n in (("q1", q1, len(meta["gene_ids"])),
                       ("q2", q2, len(meta["cell_type_labels"])),
                       ("q3", q3, len(meta["time_values"]))):
        want = (n, rank) if rank > 0 else (n, 0)
        f = f.reshape(want) if f.size == n * rank else f
        if f.shape != want:
            raise DataError(f"model JSON: {name} shape {f.shape} != {want}")
    if rank == 0:
        q1 = q1.reshape(len(meta["gene_ids"]), 0)
        q2 = q2.reshape(len(meta["cell_type_labels"]), 0)
        q3 = q3.reshape(len(meta["time_values"]), 0)
    model = CPModel(w=w, q1=q1, q2=q2, q3=q3)
    return model, meta
