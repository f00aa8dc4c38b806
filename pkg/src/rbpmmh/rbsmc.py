"""Rao-Blackwellised SMC: particles over rho, each carrying an exact Kalman filter."""
from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kalman import Whitened, ffbs_sample, kf_filter, precompute
from .kernels import KernelError, kf_bank_step, systematic_indices
from .material import MaterialParams
from .ssm import Dataset, DeviationModel, rho_walk, sample_rho_init


class DegenerateLikelihoodError(RuntimeError):
    """Every particle weight vanished at frequency index ``step`` (0-based)."""

    def __init__(self, step: int, message: str | None = None):
        super().__init__(message or f"all particle weights are zero at step {step}")
        self.step = step


@dataclass
class SmcResult:
    log_lik_hat: float
    sampled_rho_path: np.ndarray
    sampled_delta_x: np.ndarray | None
    ess_trace: np.ndarray
    resample_flags: np.ndarray
    path_seed: int
    backend: str = "kf"
    n_regularized: int = 0
    spread_trace: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_resample(self) -> int:
        return int(np.count_nonzero(self.resample_flags))


def logsumexp(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    top = a.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + np.log(np.exp(a - top).sum()))


def ess(log_weights) -> float:
    """Effective sample size of unnormalized log-weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    w = np.exp(lw - lw.max())
    return float(w.sum() ** 2 / (w * w).sum())


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling with a single uniform draw."""
    return systematic_indices(weights, rng.uniform())


# ---------------------------------------------------------------------------
# particle-parallel execution

_POOLS: dict[int, ThreadPoolExecutor] = {}
_POOL_LOCK = threading.Lock()


def _pool(n_threads: int) -> ThreadPoolExecutor:
    with _POOL_LOCK:
        pool = _POOLS.get(n_threads)
        if pool is None:
            pool = _POOLS[n_threads] = ThreadPoolExecutor(n_threads, thread_name_prefix="rbpmmh")
        return pool


def chunk_slices(n: int, n_chunks: int) -> list[slice]:
    if n_chunks <= 1 or n <= 1:
        return [slice(0, n)]
    bounds = np.linspace(0, n, min(n, max(1, n_chunks)) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def parallel_map(func, n_items: int, n_threads: int) -> list:
    """Call ``func(slice)`` over contiguous chunks; results come back in order."""
    slices = chunk_slices(n_items, n_threads)
    if len(slices) == 1:
        return [func(slices[0])]
    return list(_pool(n_threads).map(func, slices))


def _bank(P, m, rho, pre: Whitened, k, c, q, n_threads, impl):
    def run(s):
        return kf_bank_step(P[s], m[s], rho[s], pre.sigma, pre.J[k], c[k], q[k], impl=impl)

    parts = parallel_map(run, P.shape[0], n_threads)
    if len(parts) == 1:
        return parts[0]
    return tuple(np.concatenate(x) for x in zip(*parts))


def trace_ancestry(ancestors: np.ndarray, final_index: int) -> np.ndarray:
    """Indices of the lineage ending at ``final_index``, one per step."""
    K = ancestors.shape[0]
    line = np.empty(K, dtype=np.int64)
    j = int(final_index)
    for k in range(K - 1, -1, -1):
        line[k] = j
        j = int(ancestors[k, j])
    return line


def sample_delta_path(psi: MaterialParams, rho_path, dataset: Dataset, model: DeviationModel,
                      rng: np.random.Generator) -> np.ndarray:
    """Exact FFBS draw of ``dx_{1:K}`` given ``(psi, rho_{1:K})``."""
    history = kf_filter(psi, rho_path, dataset, model)
    return ffbs_sample(history, model.spatial.matrix(), rng)


def smc_run(psi: MaterialParams, dataset: Dataset, model: DeviationModel, n_particles: int,
            rng: np.random.Generator, *, pre: Whitened | None = None, ess_threshold: float = 0.5,
            n_threads: int = 1, sample_path: bool = True, impl: str | None = None) -> SmcResult:
    """Bank of interacting Kalman filters (SIR over rho with adaptive resampling).

    Returns an unbiased estimate of ``p(y_{1:K} | psi)`` on the log scale and a
    joint draw: rho by ancestral tracing, ``dx`` by FFBS along that rho path.
    The random stream consumed from ``rng`` does not depend on ``n_threads``
    or ``sample_path``.
    """
    if n_particles < 2:
        raise ValueError("n_particles must be >= 2")
    if pre is None:
        pre = precompute(dataset, model)
    K, n, Np = pre.n_freqs, pre.dim, int(n_particles)
    g, c, q = pre.residual_terms(psi)

    rho = np.asarray(sample_rho_init(model, rng, Np), dtype=np.float64)
    rho_hist = np.empty((K, Np))
    ancestors = np.empty((K, Np), dtype=np.int64)
    ess_trace = np.empty(K)
    flags = np.zeros(K, dtype=bool)
    rho_hist[0] = rho
    ancestors[0] = np.arange(Np)

    # First step is identical for every particle: update N(0, Sigma) once.
    try:
        P1, m1, core = kf_bank_step(pre.sigma[None], np.zeros((1, n)), np.ones(1), pre.sigma,
                                    pre.J[0], c[0], q[0], predict=False, impl=impl)
    except KernelError as exc:
        raise DegenerateLikelihoodError(0, str(exc)) from None
    log_z = float(core[0] + pre.log_norm[0])
    if not np.isfinite(log_z):
        raise DegenerateLikelihoodError(0)
    P = np.repeat(P1, Np, axis=0)
    m = np.repeat(m1, Np, axis=0)
    logw = np.zeros(Np)
    ess_trace[0] = Np

    for k in range(1, K):
        if ess(logw) < ess_threshold * Np:
            w = np.exp(logw - logw.max())
            idx = systematic_resample(w / w.sum(), rng)
            P, m, rho = P[idx], m[idx], rho[idx]
            logw = np.zeros(Np)
            ancestors[k] = idx
            flags[k] = True
        else:
            ancestors[k] = np.arange(Np)
        rho = rho_walk(rho, model.sigma_rho, rng.standard_normal(Np))
        rho_hist[k] = rho
        try:
            P, m, core = _bank(P, m, rho, pre, k, c, q, n_threads, impl)
        except KernelError as exc:
            raise DegenerateLikelihoodError(k, str(exc)) from None
        inc = core + pre.log_norm[k]
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
    path_seed = int(rng.integers(2**63))
    delta = None
    if sample_path:
        delta = sample_delta_path(psi, rho_path, dataset, model, np.random.default_rng(path_seed))
    return SmcResult(log_z, rho_path, delta, ess_trace, flags, path_seed)
