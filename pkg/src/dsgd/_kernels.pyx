# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled flux/tangent contraction for the quasi-linear element loop."""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow

cnp.import_array()


def flux_contract(double[:, :, :, ::1] B, double[:, ::1] W, double[:, ::1] U,
                  double p, double eps, bint jacobian=True):
    cdef Py_ssize_t nE = B.shape[0], nq = B.shape[1], dim = B.shape[2], nT = B.shape[3]
    res_arr = np.zeros((nE, nT))
    jac_arr = np.zeros((nE, nT, nT)) if jacobian else np.zeros((0, 0, 0))
    cdef double[:, ::1] res = res_arr
    cdef double[:, :, ::1] jac = jac_arr
    cdef double g[8]
    cdef double gb[256]
    cdef double s, a, b, wa, wb, acc
    cdef Py_ssize_t e, q, d, i, j
    cdef bint linear = p == 2.0
    if dim > 8 or nT > 256:
        raise ValueError("block too large for the compiled kernel")
    for e in range(nE):
        for q in range(nq):
            s = eps * eps
            for d in range(dim):
                acc = 0.0
                for i in range(nT):
                    acc = acc + B[e, q, d, i] * U[e, i]
                g[d] = acc
                s = s + acc * acc
            if linear:
                a = 1.0
                b = 0.0
            elif s > 0.0:
                a = pow(s, 0.5 * (p - 2.0))
                b = (p - 2.0) * a / s
            else:
                a = 0.0
                b = 0.0
            wa = W[e, q] * a
            wb = W[e, q] * b
            for i in range(nT):
                acc = 0.0
                for d in range(dim):
                    acc = acc + g[d] * B[e, q, d, i]
                gb[i] = acc
                res[e, i] += wa * acc
            if jacobian:
                for i in range(nT):
                    for j in range(i, nT):
                        acc = 0.0
                        for d in range(dim):
                            acc = acc + B[e, q, d, i] * B[e, q, d, j]
                        jac[e, i, j] += wa * acc + wb * gb[i] * gb[j]
        if jacobian:
            for i in range(nT):
                for j in range(i + 1, nT):
                    jac[e, j, i] = jac[e, i, j]
    return res_arr, jac_arr
