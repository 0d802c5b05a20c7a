# cython: language_level=3
"""Compiled coordinate-descent core.

Hot inner loop of the blocked solver: a full soft-thresholded sweep over
gene coordinates for one component. The pure-Python twin lives in
_cdcore_py; both must keep identical update semantics.
"""

from libc.math cimport fabs


def gene_sweep(double[::1, :] X, double[:] kappa, double[:] psi,
               double[:] f, double[:] z1, double[:] s,
               double[:] q1col, double tau):
    """Full pass over gene coordinates for one component.

    X must be Fortran-ordered so columns are contiguous. f, s and q1col
    are updated in place. Returns the largest absolute coordinate change.
    """
    cdef Py_ssize_t A = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t l, i
    cdef double a, b, g, q, qnew, delta
    cdef double maxd = 0.0

    for l in range(p):
        a = 0.0
        b = 0.0
        for i in range(A):
            g = z1[i] * X[i, l]
            b += kappa[i] * g * g
            a += g * (psi[i] - kappa[i] * f[i])
        q = q1col[l]
        a += q * b
        if b > 0.0:
            if a > tau:
                qnew = (a - tau) / b
            elif a < -tau:
                qnew = (a + tau) / b
            else:
                qnew = 0.0
        else:
            qnew = 0.0
        delta = qnew - q
        if delta != 0.0:
            q1col[l] = qnew
            for i in range(A):
                s[i] += X[i, l] * delta
                f[i] += z1[i] * X[i, l] * delta
            if fabs(delta) > maxd:
                maxd = fabs(delta)
    return maxd
