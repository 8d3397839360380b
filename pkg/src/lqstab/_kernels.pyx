# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: closed-loop state recursion and Riccati value iteration.

Both functions mirror :mod:`lqstab._pykernels` exactly in semantics; see that
module for the reference implementation and argument conventions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, isfinite

cnp.import_array()

def simulate_closed_loop(const double[:, ::1] D, const double[::1] x0,
                         const double[:, ::1] W, double cap):
    """Run x(t+1) = D x(t) + w(t+1); return (X, bad_step, magnitude)."""
    cdef Py_ssize_t p = D.shape[0]
    cdef Py_ssize_t n = W.shape[0]
    cdef Py_ssize_t t, i, j
    cdef double acc, m, v
    X_arr = np.empty((n + 1, p), dtype=np.float64)
    cdef double[:, ::1] X = X_arr
    for i in range(p):
        X[0, i] = x0[i]
    for t in range(n):
        m = 0.0
        for i in range(p):
            acc = 0.0
            for j in range(p):
                acc = acc + D[i, j] * X[t, j]
            acc = acc + W[t, i]
            X[t + 1, i] = acc
            v = fabs(acc)
            if not isfinite(v):
                m = v
            elif v > m:
                m = v
        if not (m <= cap):
            return X_arr, t + 1, m
    return X_arr, -1, 0.0


cdef double _sym_spectral_norm(double* S, Py_ssize_t p, double* work):
    """Largest |eigenvalue| of the symmetric p x p matrix S (cyclic Jacobi)."""
    cdef Py_ssize_t i, j, k, sweep
    cdef double off, app, aqq, apq, theta, t, c, s, akp, akq, best
    for i in range(p * p):
        work[i] = S[i]
    for sweep in range(100):
        off = 0.0
        for i in range(p):
            for j in range(i + 1, p):
                off = off + work[i * p + j] * work[i * p + j]
        if off <= 1e-300:
            break
        for i in range(p):
            for j in range(i + 1, p):
                apq = work[i * p + j]
                if apq == 0.0:
                    continue
                app = work[i * p + i]
                aqq = work[j * p + j]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
                s = t * c
                for k in range(p):
                    akp = work[k * p + i]
                    akq = work[k * p + j]
                    work[k * p + i] = c * akp - s * akq
                    work[k * p + j] = s * akp + c * akq
                for k in range(p):
                    akp = work[i * p + k]
                    akq = work[j * p + k]
                    work[i * p + k] = c * akp - s * akq
                    work[j * p + k] = s * akp + c * akq
                work[i * p + j] = 0.0
                work[j * p + i] = 0.0
    best = 0.0
    for i in range(p):
        if fabs(work[i * p + i]) > best:
            best = fabs(work[i * p + i])
    return best


def riccati_iterate(const double[:, ::1] A, const double[:, ::1] B, const double[:, ::1] Q,
                    const double[:, ::1] R, const double[:, ::1] P0, double tol, long max_iter):
    """Value iteration from P0; return (P, iterations, residual, converged)."""
    cdef Py_ssize_t p = A.shape[0]
    cdef Py_ssize_t r = B.shape[1]
    cdef Py_ssize_t i, j, k
    cdef long it
    cdef double acc, residual = np.inf
    cdef bint converged = False
    P_arr = np.array(P0, dtype=np.float64, copy=True)
    cdef double[:, ::1] P = P_arr
    cdef double[:, ::1] PA = np.empty((p, p))
    cdef double[:, ::1] PB = np.empty((p, r))
    cdef double[:, ::1] S = np.empty((r, r))
    cdef double[:, ::1] G = np.empty((r, p))
    cdef double[:, ::1] X = np.empty((r, p))
    cdef double[:, ::1] Pn = np.empty((p, p))
    cdef double[::1] diff = np.empty(p * p)
    cdef double[::1] work = np.empty(p * p)
    it = 0
    while it < max_iter:
        it += 1
        # PA = P A, PB = P B
        for i in range(p):
            for j in range(p):
                acc = 0.0
                for k in range(p):
                    acc = acc + P[i, k] * A[k, j]
                PA[i, j] = acc
            for j in range(r):
                acc = 0.0
                for k in range(p):
                    acc = acc + P[i, k] * B[k, j]
                PB[i, j] = acc
        # S = B' P B + R, G = B' P A
        for i in range(r):
            for j in range(r):
                acc = R[i, j]
                for k in range(p):
                    acc = acc + B[k, i] * PB[k, j]
                S[i, j] = acc
            for j in range(p):
                acc = 0.0
                for k in range(p):
                    acc = acc + B[k, i] * PA[k, j]
                G[i, j] = acc
        # Cholesky S = C C' in place (lower triangle)
        for j in range(r):
            acc = S[j, j]
            for k in range(j):
                acc = acc - S[j, k] * S[j, k]
            if not acc > 0.0:
                return P_arr, it, np.inf, False
            S[j, j] = sqrt(acc)
            for i in range(j + 1, r):
                acc = S[i, j]
                for k in range(j):
                    acc = acc - S[i, k] * S[j, k]
                S[i, j] = acc / S[j, j]
        # X = S^{-1} G by forward then back substitution
        for j in range(p):
            for i in range(r):
                acc = G[i, j]
                for k in range(i):
                    acc = acc - S[i, k] * X[k, j]
                X[i, j] = acc / S[i, i]
            for i in range(r - 1, -1, -1):
                acc = X[i, j]
                for k in range(i + 1, r):
                    acc = acc - S[k, i] * X[k, j]
                X[i, j] = acc / S[i, i]
        # Pn = Q + A' P A - G' X
        for i in range(p):
            for j in range(p):
                acc = Q[i, j]
                for k in range(p):
                    acc = acc + A[k, i] * PA[k, j]
                for k in range(r):
                    acc = acc - G[k, i] * X[k, j]
                Pn[i, j] = acc
        for i in range(p):
            for j in range(i, p):
                acc = 0.5 * (Pn[i, j] + Pn[j, i])
                if not isfinite(acc):
                    return P_arr, it, np.inf, False
                diff[i * p + j] = acc - P[i, j]
                diff[j * p + i] = acc - P[i, j]
                P[i, j] = acc
                P[j, i] = acc
        residual = _sym_spectral_norm(&diff[0], p, &work[0])
        if residual <= tol:
            converged = True
            break
    return P_arr, it, residual, converged
