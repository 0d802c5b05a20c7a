"""Pure NumPy twin of the compiled coordinate-descent core.

Semantics match cpkern._cdcore exactly (same update formulas, same
in-place contract); floating-point results may differ in the last bits
because NumPy reductions use pairwise summation while the compiled loop
accumulates sequentially.
"""

import numpy as np


def _soft(a, tau):
    if a > tau:
        return a - tau
    if a < -tau:
        return a + tau
    return 0.0


def gene_coordinate_update(X, kappa, psi, f, z1, s, q1col, l, tau):
    """One soft-thresholded gene-coordinate update; mutates f, s, q1col.

    X: (A, p) design over active cells; kappa/psi: per-cell weight and
    weighted-outcome sums; f: per-cell fitted values; z1: per-cell
    component context w_r q2[c] q3[t]; s: cached X q1_r column.
    Returns the coordinate change.
    """
    xl = X[:, l]
    g = z1 * xl
    b = float(np.dot(kappa * g, g))
    rho = psi - kappa * f
    a = float(np.dot(g, rho)) + q1col[l] * b
    if b > 0.0:
        qnew = _soft(a, tau) / b
    else:
        # no triple touches this coordinate: stated convention
        qnew = 0.0
    delta = qnew - q1col[l]
    if delta != 0.0:
        q1col[l] = qnew
        s += xl * delta
        f += g * delta
    return delta


def gene_sweep(X, kappa, psi, f, z1, s, q1col, tau):
    """Full pass over gene coordinates for one component.

    Returns the largest absolute coordinate change.
    """
    maxd = 0.0
    for l in range(X.shape[1]):
        d = gene_coordinate_update(X, kappa, psi, f, z1, s, q1col, l, tau)
        if abs(d) > maxd:
            maxd = abs(d)
    return maxd
