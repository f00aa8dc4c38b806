"""Hot inner loops of the particle filters.

Every kernel exists twice: a numba ``@njit`` loop and a pure-numpy version
with the same contract. :data:`rbpmmh._accel.USE_NUMBA` picks one at call
time. The dense Kalman-bank update has a third, LAPACK-per-particle variant
that both paths share once the state dimension is large enough for BLAS to
dominate (see ``benchmarks/bench_kernels.py``).
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from . import _accel
from ._accel import njit

#: Above this state dimension the Kalman bank always uses the LAPACK loop.
SMALL_DIM = 40


class KernelError(ArithmeticError):
    """A factorization inside a kernel failed (matrix not positive definite)."""


# ---------------------------------------------------------------------------
# systematic resampling


@njit
def _systematic_nb(weights, u):
    n = weights.shape[0]
    cum = np.empty(n)
    total = 0.0
    for i in range(n):
        total += weights[i]
        cum[i] = total
    for i in range(n):
        cum[i] /= total
    out = np.empty(n, dtype=np.int64)
    j = 0
    for i in range(n):
        pos = (i + u) / n
        while pos >= cum[j] and j < n - 1:
            j += 1
        out[i] = j
    return out


def _systematic_np(weights, u):
    n = weights.shape[0]
    cum = np.cumsum(weights)
    cum /= cum[-1]
    pos = (np.arange(n) + u) / n
    idx = np.searchsorted(cum, pos, side="right")
    return np.minimum(idx, n - 1).astype(np.int64)


def systematic_indices(weights, u: float) -> np.ndarray:
    """Ancestor indices from a single uniform ``u`` in [0, 1)."""
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if _accel.USE_NUMBA:
        return _systematic_nb(weights, float(u))
    return _systematic_np(weights, float(u))


# ---------------------------------------------------------------------------
# AR(1) recursion along zones: draws from the exponential spatial kernel in
# O(N) per row instead of multiplying by a dense Cholesky factor.


@njit
def _ar1_nb(eps, a):
    rows, n = eps.shape
    out = np.empty_like(eps)
    s = np.sqrt(1.0 - a * a)
    for r in range(rows):
        prev = eps[r, 0]
        out[r, 0] = prev
        for i in range(1, n):
            prev = a * prev + s * eps[r, i]
            out[r, i] = prev
    return out


def _ar1_np(eps, a):
    out = np.empty_like(eps)
    s = np.sqrt(1.0 - a * a)
    out[:, 0] = eps[:, 0]
    for i in range(1, eps.shape[1]):
        out[:, i] = a * out[:, i - 1] + s * eps[:, i]
    return out


def ar1_along_zones(eps: np.ndarray, a: float) -> np.ndarray:
    """Map i.i.d. standard normals ``eps[..., N]`` to unit-variance AR(1) rows.

    The output has covariance ``a**|i-j|`` along the last axis.
    """
    eps = np.asarray(eps, dtype=np.float64)
    shape = eps.shape
    flat = np.ascontiguousarray(eps.reshape(-1, shape[-1]))
    if _accel.USE_NUMBA:
        out = _ar1_nb(flat, float(a))
    else:
        out = _ar1_np(flat, float(a))
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Kalman bank: one predict + update per particle, information form.
#
# Per particle i with rho = rho[i]:
#   Pp = rho^2 P + (1 - rho^2) Sigma,  mp = rho m        (skipped if not predict)
#   Pn = (Pp^-1 + J)^-1,               mn = mp + Pn (c - J mp)
#   core = -1/2 [log|I + Pp J| + nu' S^-1 nu]
# with J = A'R^-1 A, c = A'R^-1 r, q = r'R^-1 r for the whitened residual r.
# The caller adds -1/2 (d_y log 2 pi + log|R|).


@njit
def _chol_into(A, L, n):
    for j in range(n):
        for i in range(j):
            L[i, j] = 0.0
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    return True


@njit
def _chol_inverse_into(L, Li, out, n):
    # Li <- L^-1 (lower), out <- (L L')^-1 = Li' Li
    for j in range(n):
        for i in range(j):
            Li[i, j] = 0.0
        Li[j, j] = 1.0 / L[j, j]
        for i in range(j + 1, n):
            s = 0.0
            for k in range(j, i):
                s -= L[i, k] * Li[k, j]
            Li[i, j] = s / L[i, i]
    for i in range(n):
        for j in range(i + 1):
            s = 0.0
            for k in range(i, n):
                s += Li[k, i] * Li[k, j]
            out[i, j] = s
            out[j, i] = s


@njit
def _bank_small_nb(P, m, rho, Sigma, J, c, q, predict, P_out, m_out, core_out):
    npart, n, _ = P.shape
    Pp = np.empty((n, n))
    L = np.empty((n, n))
    Li = np.empty((n, n))
    W = np.empty((n, n))
    mp = np.empty(n)
    b = np.empty(n)
    for p in range(npart):
        r = rho[p]
        r2 = r * r
        for a in range(n):
            if predict:
                mp[a] = r * m[p, a]
                for bb in range(n):
                    Pp[a, bb] = r2 * P[p, a, bb] + (1.0 - r2) * Sigma[a, bb]
            else:
                mp[a] = m[p, a]
                for bb in range(n):
                    Pp[a, bb] = P[p, a, bb]
        if not _chol_into(Pp, L, n):
            return p
        logdet = 0.0
        for a in range(n):
            logdet += 2.0 * np.log(L[a, a])
        _chol_inverse_into(L, Li, W, n)
        for a in range(n):
            for bb in range(n):
                W[a, bb] += J[a, bb]
        if not _chol_into(W, L, n):
            return p
        for a in range(n):
            logdet += 2.0 * np.log(L[a, a])
        _chol_inverse_into(L, Li, W, n)
        quad = q
        for a in range(n):
            jm = 0.0
            for bb in range(n):
                jm += J[a, bb] * mp[bb]
            quad += mp[a] * (jm - 2.0 * c[a])
            b[a] = c[a] - jm
        for a in range(n):
            s = 0.0
            for bb in range(n):
                s += W[a, bb] * b[bb]
            quad -= b[a] * s
            m_out[p, a] = mp[a] + s
            for bb in range(n):
                P_out[p, a, bb] = W[a, bb]
        core_out[p] = -0.5 * (logdet + quad)
    return -1


def _bank_small_np(P, m, rho, Sigma, J, c, q, predict):
    n = P.shape[-1]
    if predict:
        r2 = (rho * rho)[:, None, None]
        Pp = r2 * P + (1.0 - r2) * Sigma
        mp = rho[:, None] * m
    else:
        Pp, mp = P, m
    try:
        L = np.linalg.cholesky(Pp)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        Lam = np.linalg.inv(Pp) + J
        Lc = np.linalg.cholesky(Lam)
    except np.linalg.LinAlgError as exc:
        raise KernelError(str(exc)) from None
    logdet += 2.0 * np.log(np.diagonal(Lc, axis1=1, axis2=2)).sum(axis=1)
    Pn = np.linalg.inv(Lam)
    Pn = 0.5 * (Pn + np.swapaxes(Pn, 1, 2))
    Jm = mp @ J
    b = c - Jm
    Pb = np.einsum("pij,pj->pi", Pn, b)
    quad = q + np.einsum("pi,pi->p", mp, Jm - 2.0 * c) - np.einsum("pi,pi->p", b, Pb)
    return Pn, mp + Pb, -0.5 * (logdet + quad)


def _bank_lapack(P, m, rho, Sigma, J, c, q, predict):
    npart, n, _ = P.shape
    P_out = np.empty_like(P)
    m_out = np.empty_like(m)
    core = np.empty(npart)
    upper = np.triu_indices(n, 1)
    for p in range(npart):
        if predict:
            r = rho[p]
            Pp = (r * r) * P[p] + (1.0 - r * r) * Sigma
            mp = r * m[p]
        else:
            Pp, mp = P[p], m[p]
        L, info = lapack.dpotrf(Pp, lower=1, clean=0)
        if info != 0:
            raise KernelError(f"predicted covariance not positive definite (particle {p})")
        logdet = 2.0 * np.log(np.diagonal(L)).sum()
        Lam, info = lapack.dpotri(L, lower=1)
        Lam += J
        Lc, info = lapack.dpotrf(Lam, lower=1, clean=0)
        if info != 0:
            raise KernelError(f"posterior information not positive definite (particle {p})")
        logdet += 2.0 * np.log(np.diagonal(Lc)).sum()
        Pn, info = lapack.dpotri(Lc, lower=1)
        Pn[upper] = Pn.T[upper]
        Jm = J @ mp
        b = c - Jm
        Pb = Pn @ b
        quad = q + mp @ (Jm - 2.0 * c) - b @ Pb
        P_out[p] = Pn
        m_out[p] = mp + Pb
        core[p] = -0.5 * (logdet + quad)
    return P_out, m_out, core


def kf_bank_step(P, m, rho, Sigma, J, c, q, *, predict=True, impl=None):
    """Advance a stack of Kalman filters by one predict/update.

    Parameters
    ----------
    P, m : (n_p, n, n), (n_p, n)
        Filtered covariances and means from the previous step.
    rho : (n_p,)
        Per-particle AR coefficient used for the prediction.
    Sigma, J : (n, n)
        Stationary deviation covariance and observation information ``A'R^-1 A``.
    c, q : (n,), float
        ``A'R^-1 r`` and ``r'R^-1 r`` for the residual ``r = y - y0 - A g``.
    predict : bool
        ``False`` applies the update directly to ``(P, m)``.
    impl : {"numba", "numpy", "lapack"}, optional
        Force an implementation; by default chosen from the size and the
        numba switch.

    Returns
    -------
    P_new, m_new, core
        ``core`` is the log predictive density without the
        ``-(d_y log 2 pi + log|R|)/2`` constant.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    m = np.ascontiguousarray(m, dtype=np.float64)
    rho = np.ascontiguousarray(rho, dtype=np.float64)
    n = P.shape[-1]
    if impl is None:
        if n > SMALL_DIM:
            impl = "lapack"
        else:
            impl = "numba" if _accel.USE_NUMBA else "numpy"
    if impl == "lapack":
        return _bank_lapack(P, m, rho, Sigma, J, c, float(q), predict)
    if impl == "numpy":
        return _bank_small_np(P, m, rho, Sigma, J, c, float(q), predict)
    P_out = np.empty_like(P)
    m_out = np.empty_like(m)
    core = np.empty(P.shape[0])
    bad = _bank_small_nb(P, m, rho, np.ascontiguousarray(Sigma), np.ascontiguousarray(J),
                         np.ascontiguousarray(c), float(q), bool(predict), P_out, m_out, core)
    if bad >= 0:
        raise KernelError(f"covariance not positive definite (particle {bad})")
    return P_out, m_out, core
