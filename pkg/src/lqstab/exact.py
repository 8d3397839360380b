"""Fixed-point simulation and exact least squares for unstable closed loops.

Once a closed loop with an eigenvalue outside the unit circle has run long
enough that ``|x(t)|`` exceeds about ``1e16`` times the noise level, float64
states can no longer carry the noise contribution: the rounding error in the
growing coordinate swamps everything the estimator needs. Here states are
kept as Python integers ``X = round(x * 2**FRAC_BITS)``, updated with exact
integer products (the matrix entries are dyadic rationals), and the least-
squares normal equations are accumulated and solved in exact arithmetic.
"""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

FRAC_BITS = 64
MAX_BITS = 400_000


def dyadic_matrix(M):
    """Integers ``N`` and shift ``g`` with ``M == N / 2**g`` exactly."""
    ratios = [[float(v).as_integer_ratio() for v in row] for row in np.asarray(M, dtype=float)]
    g = max(den.bit_length() - 1 for row in ratios for _, den in row)
    ints = [[num << (g - (den.bit_length() - 1)) for num, den in row] for row in ratios]
    return ints, g


def to_fixed(values, frac_bits=FRAC_BITS):
    """Round floats to fixed-point integers (nested lists mirror the input shape)."""
    arr = np.rint(np.ldexp(np.asarray(values, dtype=float), frac_bits))
    return arr.astype(object).tolist() if arr.ndim else int(arr)


def _int_list(rows):
    return [[int(v) for v in row] for row in rows]


def simulate_fixed(D, x0_fixed, W, frac_bits=FRAC_BITS, max_bits=MAX_BITS):
    """Iterate ``X(t+1) = round(D X(t)) + W(t+1)`` in fixed point.

    ``x0_fixed`` is a list of ints; ``W`` is an ``(n, p)`` float array. Returns the
    list of integer states, or ``(states, bad_step)`` semantics through the
    second return value (-1 on success).
    """
    Dint, g = dyadic_matrix(D)
    half = (1 << (g - 1)) if g > 0 else 0
    p = len(Dint)
    Wint = _int_list(to_fixed(W, frac_bits)) if len(W) else []
    x = [int(v) for v in x0_fixed]
    states = [tuple(x)]
    rows = [list(enumerate(row)) for row in Dint]
    for t, w in enumerate(Wint):
        nxt = []
        for i in range(p):
            acc = 0
            for j, d in rows[i]:
                acc += d * x[j]
            if g:
                acc = (acc + half) >> g
            nxt.append(acc + w[i])
        x = nxt
        states.append(tuple(x))
        if max(abs(v) for v in x).bit_length() > max_bits:
            return states, t + 1
    return states, -1


FLOAT_HEADROOM = 960


def float_view(states, frac_bits=FRAC_BITS):
    """Scaled float view: ``(Z, E)`` with ``x(t) ~= Z[t] * 2**E[t]``, ``E >= 0``."""
    n = len(states)
    p = len(states[0]) if n else 0
    Z = np.empty((n, p))
    E = np.zeros(n, dtype=np.int64)
    for t, row in enumerate(states):
        bits = max(abs(v) for v in row).bit_length() if p else 0
        shift = max(0, bits - FLOAT_HEADROOM)
        for i, v in enumerate(row):
            # right shift floors; relative error at most 2**-FLOAT_HEADROOM
            Z[t, i] = math.ldexp(float(v >> shift), -frac_bits)
        E[t] = shift
    return Z, E


def gram_sums(states):
    """Exact ``V = sum x(t)x(t)'`` and ``C = sum x(t+1)x(t)'`` over consecutive pairs."""
    p = len(states[0])
    V = [[0] * p for _ in range(p)]
    C = [[0] * p for _ in range(p)]
    for t in range(len(states) - 1):
        x = states[t]
        y = states[t + 1]
        for i in range(p):
            xi = x[i]
            yi = y[i]
            Vi = V[i]
            Ci = C[i]
            for j in range(p):
                Ci[j] += yi * x[j]
            for j in range(i, p):
                Vi[j] += xi * x[j]
    for i in range(p):
        for j in range(i):
            V[i][j] = V[j][i]
    return V, C


def inverse(V):
    """Exact inverse of an integer matrix as Fractions, or None when singular."""
    p = len(V)
    aug = [[Fraction(V[i][j]) for j in range(p)] + [Fraction(int(i == j)) for j in range(p)]
           for i in range(p)]
    for col in range(p):
        piv = max(range(col, p), key=lambda r: abs(aug[r][col]))
        if aug[piv][col] == 0:
            return None
        aug[col], aug[piv] = aug[piv], aug[col]
        pv = aug[col][col]
        aug[col] = [v / pv for v in aug[col]]
        for r in range(p):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    return [row[p:] for row in aug]


def solve_exact(V, C, Vinv=None):
    """``C V^{-1}`` rounded to float, or None when ``V`` is exactly singular."""
    if Vinv is None:
        Vinv = inverse(V)
        if Vinv is None:
            return None
    p = len(V)
    return [[float(sum(C[i][m] * Vinv[m][j] for m in range(p))) for j in range(p)]
            for i in range(p)]


def log2_min_eig(Vinv):
    """``log2 lambda_min(V)`` from the exact inverse of a positive definite ``V``."""
    top = max(abs(v) for row in Vinv for v in row)
    e = top.numerator.bit_length() - top.denominator.bit_length()
    scaled = np.array([[float(v / Fraction(2) ** e) for v in row] for row in Vinv])
    lam = float(np.linalg.eigvalsh(0.5 * (scaled + scaled.T))[-1])
    return -(math.log2(lam) + e)


def scaled_float_matrix(*mats, frac_bits=0, headroom=1000):
    """Float views of integer matrices on a shared power-of-two scale.

    The integers are read as fixed point with ``frac_bits`` fraction bits.
    Returns ``(floats, scale)`` with ``mat * 2**-frac_bits ~= floats * 2**scale``;
    ``scale`` is 0 unless the largest magnitude would exceed ``2**headroom``.
    """
    bits = max((abs(v).bit_length() for M in mats for row in M for v in row), default=0)
    scale = max(0, bits - frac_bits - headroom)
    pre = max(0, bits - headroom)
    out = [np.array([[math.ldexp(float(v >> pre), pre - frac_bits - scale) for v in row]
                     for row in M]) for M in mats]
    return out, scale
