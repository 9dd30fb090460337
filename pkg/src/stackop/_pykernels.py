"""Pure numpy implementations of the Monte-Carlo kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or when ``STACKOP_PURE_PYTHON=1``.
"""
from math import factorial, sqrt

import numpy as np


def haar_wiener(dw, lo, mid, hi, amp):
    """Wiener integral of a Haar wavelet: signed sums of increments per scenario."""
    dw = np.asarray(dw, dtype=np.float64)
    return amp * (dw[:, lo:mid].sum(axis=1) - dw[:, mid:hi].sum(axis=1))


def hermite_chaos(xi, degrees):
    """Product over columns of sqrt(deg!) * h_deg(xi[:, c])."""
    xi = np.asarray(xi, dtype=np.float64)
    out = np.ones(xi.shape[0])
    for c, deg in enumerate(degrees):
        x = xi[:, c]
        h_prev = np.ones_like(x)
        h = x.copy()
        if deg == 0:
            h = h_prev
        for i in range(1, deg):
            h_prev, h = h, (x * h - h_prev) / (i + 1)
        out *= sqrt(factorial(deg)) * h
    return out


def gram_separable(time_profiles, chaos, dt):
    """Gram matrix and standard errors for processes psi_a(t) * xi_a(omega).

    Returns ``(G, se)`` where ``G[a, b]`` is the Monte-Carlo inner product and
    ``se[a, b]`` the standard error of the per-scenario summands.
    """
    tp = np.asarray(time_profiles, dtype=np.float64)
    ch = np.asarray(chaos, dtype=np.float64)
    n_paths = ch.shape[1]
    tgram = tp @ tp.T * dt
    m1 = ch @ ch.T / n_paths
    m2 = (ch * ch) @ (ch * ch).T / n_paths
    var = np.maximum(m2 - m1 * m1, 0.0) * n_paths / max(n_paths - 1, 1)
    return tgram * m1, np.abs(tgram) * np.sqrt(var / n_paths)


def pathwise_inner(u, v, dt):
    """Per-scenario time integral of u^T v on the grid, shape (P,)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.einsum("pmk,pmk->p", u, v) * dt
