"""Ensemble Kalman filters as a drop-in for the exact filters inside RB-SMC.

Perturbed-observation EnKF. With anomalies ``Z = (X - mean) / sqrt(M - 1)``
(``n x M``) and ``HZ = A Z`` the innovation covariance is
``S = HZ HZ' + R``. For diagonal ``R`` the Woodbury identity

    S^-1 = R^-1 - R^-1 HZ (I_M + HZ' R^-1 HZ)^-1 HZ' R^-1

and the determinant lemma ``|S| = |R| |I_M + HZ' R^-1 HZ|`` keep every
factorization ``M x M``; neither ``S`` nor the ensemble covariance is formed.
When ``d_y <= M`` the ``d_y x d_y`` matrix ``S`` is the cheaper one to factor
and is used directly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .kalman import LOG_2PI
from .material import MaterialParams, material_eval_many
from .rbsmc import (DegenerateLikelihoodError, SmcResult, ess, logsumexp, parallel_map,
                    systematic_resample, trace_ancestry)
from .ssm import ContractError, Dataset, DeviationModel, Metamodel, rho_walk, sample_rho_init

log = logging.getLogger(__name__)


@dataclass
class Ensemble:
    members: np.ndarray  # (M, n)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float64)
        if self.members.ndim != 2 or self.members.shape[0] < 2:
            raise ContractError("an ensemble needs at least two members")

    @property
    def ensemble_size(self) -> int:
        return self.members.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    def anomalies(self) -> np.ndarray:
        """``(X - mean)' / sqrt(M - 1)``, shape ``(n, M)``."""
        X = self.members
        return (X - X.mean(axis=0)).T / np.sqrt(X.shape[0] - 1)

    def cov(self) -> np.ndarray:
        Z = self.anomalies()
        return Z @ Z.T


class UpdateStats:
    """Counts regularized core solves (rank-deficient ``M x M`` systems)."""

    def __init__(self):
        self.regularized = 0


def enkf_predict(ens: Ensemble, rho_next: float, model: DeviationModel, rng: np.random.Generator,
                 *, noise: bool = True) -> Ensemble:
    """Propagate every member through the AR(1) state equation (shared ``rho_next``)."""
    X = rho_next * ens.members
    if noise:
        X = X + np.sqrt(1.0 - rho_next * rho_next) * model.spatial.sample(rng, ens.ensemble_size)
    return Ensemble(X)


def _r_diag(metamodel: Metamodel, k: int) -> np.ndarray:
    R = metamodel.R[k]
    d = np.diagonal(R).copy()
    if np.any(R - np.diag(d)):
        raise ContractError("the EnKF update requires a diagonal R_k")
    if np.any(d <= 0):
        raise ContractError("R_k must have a positive diagonal")
    return d


def _core_factor(core, stats):
    try:
        return cho_factor(core, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        if stats is not None:
            stats.regularized += 1
        log.warning("regularizing rank-deficient ensemble core matrix")
        jitter = 1e-10 * max(1.0, np.trace(core) / core.shape[0])
        return cho_factor(core + jitter * np.eye(core.shape[0]), lower=True, check_finite=False)


def enkf_update(ens: Ensemble, k: int, y_k, metamodel: Metamodel, g_k, rng: np.random.Generator | None,
                *, stats: UpdateStats | None = None) -> tuple[Ensemble, float]:
    """Perturbed-observation analysis step in ensemble space.

    ``rng=None`` disables the observation perturbations. Returns the analysis
    ensemble and ``log N(mean innovation; 0, S_hat)``. The Woodbury form is
    used when ``M < d_y``; otherwise ``S_hat`` itself is the smaller matrix.
    """
    A = metamodel.A[k]
    d_y, n = A.shape
    y_k = np.asarray(y_k, dtype=np.float64)
    if y_k.shape != (d_y,) or ens.members.shape[1] != n:
        raise ContractError("dimension mismatch in enkf_update")
    r = _r_diag(metamodel, k)
    X = ens.members
    M = X.shape[0]
    Z = ens.anomalies()
    HZ = A @ Z                                   # d_y x M
    base = y_k - metamodel.y0[k] - A @ g_k
    nu_bar = base - A @ X.mean(axis=0)
    D = base[:, None] - A @ X.T                  # d_y x M innovations per member
    if rng is not None:
        D = D + np.sqrt(r)[:, None] * rng.standard_normal((d_y, M))

    if M < d_y:
        # Woodbury: every factorization is M x M
        RiHZ = HZ / r[:, None]
        cf = _core_factor(np.eye(M) + HZ.T @ RiHZ, stats)

        def s_inv(B):
            return B / r[:, None] - RiHZ @ cho_solve(cf, HZ.T @ (B / r[:, None]), check_finite=False)

        t = HZ.T @ (nu_bar / r)
        quad = nu_bar @ (nu_bar / r) - t @ cho_solve(cf, t, check_finite=False)
        logdet = np.log(r).sum() + 2.0 * np.log(np.diagonal(cf[0])).sum()
    else:
        # fewer observations than members: factor S itself (d_y x d_y)
        S = HZ @ HZ.T
        S[np.diag_indices(d_y)] += r
        cf = _core_factor(S, stats)

        def s_inv(B):
            return cho_solve(cf, B, check_finite=False)

        quad = nu_bar @ s_inv(nu_bar)
        logdet = 2.0 * np.log(np.diagonal(cf[0])).sum()
    inc = -0.5 * (d_y * LOG_2PI + logdet + quad)
    X_new = X + (Z @ (HZ.T @ s_inv(D))).T
    return Ensemble(X_new), float(inc)


def enkf_update_dense(ens: Ensemble, k: int, y_k, metamodel: Metamodel, g_k,
                      rng: np.random.Generator | None) -> tuple[Ensemble, float]:
    """Reference analysis step with the dense ``d_y x d_y`` inverse (testing only)."""
    A = metamodel.A[k]
    R = metamodel.R[k]
    X = ens.members
    M = X.shape[0]
    Z = ens.anomalies()
    S = A @ Z @ (A @ Z).T + R
    S_inv = np.linalg.inv(S)
    gain = Z @ (A @ Z).T @ S_inv
    base = np.asarray(y_k) - metamodel.y0[k] - A @ g_k
    nu_bar = base - A @ X.mean(axis=0)
    _, logdet = np.linalg.slogdet(S)
    inc = -0.5 * (len(nu_bar) * LOG_2PI + logdet + nu_bar @ S_inv @ nu_bar)
    D = base[:, None] - A @ X.T
    if rng is not None:
        D = D + np.sqrt(np.diagonal(R))[:, None] * rng.standard_normal((A.shape[0], M))
    return Ensemble(X + (gain @ D).T), float(inc)


def _particle_rng(key: int, k: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(key, spawn_key=(k, i)))


def smc_run_enkf(psi: MaterialParams, dataset: Dataset, model: DeviationModel, n_particles: int,
                 ensemble_size: int, rng: np.random.Generator, *, ess_threshold: float = 0.5,
                 n_threads: int = 1, noise: bool = True, sample_path: bool = True) -> SmcResult:
    """RB-SMC with interacting EnKFs; the likelihood estimate is biased in general.

    Each particle owns a substream keyed by ``(key, k, particle)`` so results
    do not depend on ``n_threads``. ``noise=False`` suppresses both the state
    and observation perturbations. The returned ``dx`` path is one ensemble
    member traced through the resampling ancestry.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if ensemble_size < 2:
        raise ValueError("ensemble_size must be >= 2")
    if model.dim != dataset.state_dim:
        raise ContractError(f"model state dim {model.dim} != dataset state dim {dataset.state_dim}")
    K, n, Np, M = dataset.n_freqs, model.dim, int(n_particles), int(ensemble_size)
    mm = dataset.metamodel
    g = material_eval_many(psi, dataset.frequencies, model.n_zones)
    key = int(rng.integers(2**63))
    tracked = int(rng.integers(M))
    stats = [UpdateStats() for _ in range(Np)]

    rho = np.asarray(sample_rho_init(model, rng, Np), dtype=np.float64)
    rho_hist = np.empty((K, Np))
    ancestors = np.empty((K, Np), dtype=np.int64)
    member_hist = np.empty((K, Np, n))
    ess_trace = np.empty(K)
    spread = np.empty(K)
    flags = np.zeros(K, dtype=bool)
    ensembles: list[Ensemble] = [None] * Np
    logw = np.zeros(Np)
    log_z = 0.0

    for k in range(K):
        if k == 0:
            ancestors[0] = np.arange(Np)
        elif ess(logw) < ess_threshold * Np:
            w = np.exp(logw - logw.max())
            idx = systematic_resample(w / w.sum(), rng)
            ensembles = [ensembles[j] for j in idx]
            rho = rho[idx]
            logw = np.zeros(Np)
            ancestors[k] = idx
            flags[k] = True
        else:
            ancestors[k] = np.arange(Np)
        if k > 0:
            rho = rho_walk(rho, model.sigma_rho, rng.standard_normal(Np))
        rho_hist[k] = rho
        inc = np.empty(Np)

        def step(s, k=k, rho=rho, prior=ensembles):
            out = []
            for i in range(s.start, s.stop):
                prng = _particle_rng(key, k, i)
                if k == 0:
                    X = model.spatial.sample(prng, M) if noise else np.zeros((M, n))
                    ens = Ensemble(X)
                else:
                    ens = enkf_predict(prior[i], rho[i], model, prng, noise=noise)
                ens, ll = enkf_update(ens, k, dataset.observations[k], mm, g[k],
                                      prng if noise else None, stats=stats[i])
                out.append((ens, ll))
            return out

        results = [r for part in parallel_map(step, Np, n_threads) for r in part]
        ensembles = [r[0] for r in results]
        inc[:] = [r[1] for r in results]
        member_hist[k] = [e.members[tracked] for e in ensembles]
        spread[k] = float(np.mean([e.members.std(axis=0, ddof=1).mean() for e in ensembles]))
        inc[~np.isfinite(inc)] = -np.inf
        prev = logw
        logw = prev + inc
        if not np.any(np.isfinite(logw)):
            raise DegenerateLikelihoodError(k)
        log_z += float(logsumexp(logw) - logsumexp(prev))
        ess_trace[k] = ess(logw)

    w = np.exp(logw - logw.max())
    final = int(rng.choice(Np, p=w / w.sum()))
    line = trace_ancestry(ancestors, final)
    rho_path = rho_hist[np.arange(K), line]
    delta = member_hist[np.arange(K), line] if sample_path else None
    path_seed = int(rng.integers(2**63))
    return SmcResult(log_z, rho_path, delta, ess_trace, flags, path_seed, backend="enkf",
                     n_regularized=sum(s.regularized for s in stats), spread_trace=spread,
                     extra={"ensemble_size": M})
