"""Exact Kalman filtering and backward sampling given ``(psi, rho_{1:K})``.

:func:`kf_update` is the reference covariance-form (Joseph) update. The
particle bank in :mod:`rbpmmh.rbsmc` uses the algebraically identical
information-form kernel from :mod:`rbpmmh.kernels` on whitened data prepared
by :func:`precompute`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .material import MaterialParams, material_eval_many
from .ssm import ContractError, Dataset, DeviationModel, Metamodel

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(ArithmeticError):
    """Factorization failure; ``condition`` holds the 2-norm condition number."""

    def __init__(self, message: str, condition: float | None = None):
        if condition is not None:
            message = f"{message} (condition number {condition:.3e})"
        super().__init__(message)
        self.condition = condition


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ContractError(f"covariance shape {self.cov.shape} does not match mean ({n},)")


def _sym(a):
    return 0.5 * (a + a.T)


def kf_predict(belief: GaussianBelief, rho_next: float, sigma: np.ndarray) -> GaussianBelief:
    """Propagate through ``dx' = rho dx + w``, ``w ~ N(0, (1 - rho^2) Sigma)``."""
    r2 = rho_next * rho_next
    return GaussianBelief(rho_next * belief.mean, _sym(r2 * belief.cov + (1.0 - r2) * sigma))


def kf_update(belief: GaussianBelief, k: int, y_k, metamodel: Metamodel, g_k) -> tuple[GaussianBelief, float]:
    """Condition on ``y_k`` where the observed state is ``g_k + dx``.

    Returns the posterior belief and ``log N(y_k; A(g + m) + y0, A P A' + R)``.
    """
    A = metamodel.A[k]
    R = metamodel.R[k]
    y_k = np.asarray(y_k, dtype=np.float64)
    if y_k.shape != (A.shape[0],) or np.shape(g_k) != (A.shape[1],) or belief.mean.shape != (A.shape[1],):
        raise ContractError("dimension mismatch in kf_update")
    P = belief.cov
    nu = y_k - A @ (g_k + belief.mean) - metamodel.y0[k]
    PAt = P @ A.T
    S = _sym(A @ PAt + R)
    try:
        cf = cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalError("innovation covariance is not positive definite",
                             float(np.linalg.cond(S))) from None
    gain = cho_solve(cf, PAt.T, check_finite=False).T
    alpha = cho_solve(cf, nu, check_finite=False)
    logdet = 2.0 * np.log(np.diagonal(cf[0])).sum()
    inc = -0.5 * (nu.size * LOG_2PI + logdet + nu @ alpha)
    ikh = np.eye(P.shape[0]) - gain @ A
    cov = _sym(ikh @ P @ ikh.T + gain @ R @ gain.T)
    return GaussianBelief(belief.mean + gain @ nu, cov), float(inc)


@dataclass
class FilterHistory:
    """Filtered moments for k = 1..K plus the rho path that produced them."""

    means: np.ndarray
    covs: np.ndarray
    rho_path: np.ndarray
    log_lik: float


def _check_rho_path(rho_path, K):
    rho_path = np.asarray(rho_path, dtype=np.float64)
    if rho_path.shape != (K,):
        raise ContractError(f"rho path has shape {rho_path.shape}, expected ({K},)")
    if np.any(~((rho_path > 0) & (rho_path <= 1))):
        raise ContractError("rho values must lie in (0, 1]")
    return rho_path


def kf_filter(psi: MaterialParams, rho_path, dataset: Dataset, model: DeviationModel) -> FilterHistory:
    """Run :func:`kf_predict`/:func:`kf_update` over all frequencies from ``N(0, Sigma)``."""
    if model.dim != dataset.state_dim:
        raise ContractError(f"model state dim {model.dim} != dataset state dim {dataset.state_dim}")
    K = dataset.n_freqs
    rho_path = _check_rho_path(rho_path, K)
    sigma = model.spatial.matrix()
    g = material_eval_many(psi, dataset.frequencies, model.n_zones)
    n = model.dim
    means = np.empty((K, n))
    covs = np.empty((K, n, n))
    belief = GaussianBelief(np.zeros(n), sigma)
    total = 0.0
    for k in range(K):
        if k > 0:
            belief = kf_predict(belief, rho_path[k], sigma)
        belief, inc = kf_update(belief, k, dataset.observations[k], dataset.metamodel, g[k])
        total += inc
        means[k] = belief.mean
        covs[k] = belief.cov
    return FilterHistory(means, covs, rho_path, total)


def kf_loglik(psi: MaterialParams, rho_path, dataset: Dataset, model: DeviationModel) -> float:
    """Exact ``log p(y_{1:K} | psi, rho_{1:K})``."""
    return kf_filter(psi, rho_path, dataset, model).log_lik


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(_sym(cov))
        return v * np.sqrt(np.clip(w, 0.0, None))


def ffbs_sample(history: FilterHistory, sigma: np.ndarray, rng: np.random.Generator, size=None):
    """Backward-simulate ``dx_{1:K}`` from filtered moments.

    Uses ``M = rho_{k+1} I`` and ``Q = (1 - rho_{k+1}^2) Sigma``. Returns
    ``(K, n)``, or ``(size, K, n)`` when ``size`` is given.
    """
    K, n = history.means.shape
    draws = 1 if size is None else int(size)
    out = np.empty((draws, K, n))
    out[:, K - 1] = history.means[K - 1] + rng.standard_normal((draws, n)) @ _psd_factor(history.covs[K - 1]).T
    for k in range(K - 2, -1, -1):
        rho = history.rho_path[k + 1]
        P = history.covs[k]
        m = history.means[k]
        Pp = _sym(rho * rho * P + (1.0 - rho * rho) * sigma)
        try:
            gain_t = np.linalg.solve(Pp, rho * P)
        except np.linalg.LinAlgError:
            gain_t = np.linalg.pinv(Pp) @ (rho * P)
        cov = _sym(P - gain_t.T @ (rho * P))
        mean = m + (out[:, k + 1] - rho * m) @ gain_t
        out[:, k] = mean + rng.standard_normal((draws, n)) @ _psd_factor(cov).T
    return out[0] if size is None else out


# ---------------------------------------------------------------------------
# whitened data for the information-form bank


@dataclass(frozen=True)
class Whitened:
    """Psi-independent pieces of the likelihood, with ``R_k`` whitened away.

    ``A_w = L_R^-1 A``, ``y_w = L_R^-1 (y - y0)``, ``J = A_w' A_w``;
    ``log_norm = -(d_y log 2 pi + log|R|) / 2``.
    """

    sigma: np.ndarray
    A_w: np.ndarray
    y_w: np.ndarray
    J: np.ndarray
    log_norm: np.ndarray
    freqs: np.ndarray
    n_zones: int

    @property
    def n_freqs(self) -> int:
        return self.A_w.shape[0]

    @property
    def dim(self) -> int:
        return self.A_w.shape[2]

    def residual_terms(self, psi: MaterialParams):
        """``c_k = A_w' r_k`` and ``q_k = |r_k|^2`` with ``r_k = y_w - A_w g_k``."""
        g = material_eval_many(psi, self.freqs, self.n_zones)
        r = self.y_w - (self.A_w @ g[:, :, None])[:, :, 0]
        c = (np.swapaxes(self.A_w, 1, 2) @ r[:, :, None])[:, :, 0]
        q = np.einsum("ki,ki->k", r, r)
        return g, c, q


def precompute(dataset: Dataset, model: DeviationModel) -> Whitened:
    if model.dim != dataset.state_dim:
        raise ContractError(f"model state dim {model.dim} != dataset state dim {dataset.state_dim}")
    mm = dataset.metamodel
    K, d_y, n = mm.A.shape
    A_w = np.empty_like(mm.A)
    y_w = np.empty((K, d_y))
    log_norm = np.empty(K)
    for k in range(K):
        try:
            L = np.linalg.cholesky(mm.R[k])
        except np.linalg.LinAlgError:
            raise NumericalError(f"R_{k + 1} is singular", float(np.linalg.cond(mm.R[k]))) from None
        A_w[k] = solve_triangular(L, mm.A[k], lower=True)
        y_w[k] = solve_triangular(L, dataset.observations[k] - mm.y0[k], lower=True)
        log_norm[k] = -0.5 * (d_y * LOG_2PI + 2.0 * np.log(np.diagonal(L)).sum())
    J = np.swapaxes(A_w, 1, 2) @ A_w
    J = 0.5 * (J + np.swapaxes(J, 1, 2))
    return Whitened(model.spatial.matrix(), A_w, y_w, J, log_norm,
                    np.asarray(dataset.frequencies), model.n_zones)
