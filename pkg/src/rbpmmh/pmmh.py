"""Particle marginal Metropolis-Hastings over the material hyperparameters.

The chain lives in an unconstrained space: each free parameter is written as
``offset + excess`` with ``excess = exp(u)`` (log-normal prior) or a scaled
logistic (uniform prior). Offsets encode the model's ordering constraints
(``eps_inf >= 1``, ``eps_s >= eps_inf``, ``mu_s >= 1``). The change-of-variables
Jacobian is folded into :meth:`Parameterization.log_prior`, so the random-walk
proposal is symmetric in ``u``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .enkf import smc_run_enkf
from .kalman import precompute
from .material import MaterialParams
from .rbsmc import DegenerateLikelihoodError, SmcResult, sample_delta_path, smc_run
from .ssm import Dataset, DeviationModel

log = logging.getLogger(__name__)

BACKENDS = ("kf", "enkf")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Prior:
    """Prior on a parameter's excess over its offset.

    ``lognormal``: ``log(excess) ~ N(mu, sigma^2)``; ``uniform``: excess
    uniform on ``(low, high)``.
    """

    kind: str = "lognormal"
    mu: float = 0.0
    sigma: float = 1.0
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("lognormal", "uniform"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if self.kind == "lognormal" and not self.sigma > 0:
            raise ConfigError("lognormal prior needs sigma > 0")
        if self.kind == "uniform" and not self.high > self.low >= 0:
            raise ConfigError("uniform prior needs 0 <= low < high")

    def to_u(self, excess: float) -> float:
        if self.kind == "lognormal":
            return math.log(excess)
        p = (excess - self.low) / (self.high - self.low)
        return math.log(p) - math.log1p(-p)

    def from_u(self, u: float) -> float:
        if self.kind == "lognormal":
            return math.exp(u)
        return self.low + (self.high - self.low) * float(expit(u))

    def log_density_u(self, u: float) -> float:
        """Log prior density of ``u``: density of the excess times ``|d excess / du|``."""
        if self.kind == "lognormal":
            x = math.exp(u)
            log_px = (-0.5 * ((u - self.mu) / self.sigma) ** 2 - math.log(self.sigma)
                      - 0.5 * math.log(2 * math.pi) - math.log(x))
            return log_px + u
        s = float(expit(u))
        if s <= 0.0 or s >= 1.0:
            return -math.inf
        # density 1/width times Jacobian width * s * (1 - s)
        return math.log(s) + math.log1p(-s)

    def sample_excess(self, rng: np.random.Generator, size=None):
        if self.kind == "lognormal":
            return np.exp(rng.normal(self.mu, self.sigma, size))
        return rng.uniform(self.low, self.high, size)

    def excess_cdf(self, x):
        from scipy import stats

        if self.kind == "lognormal":
            return stats.lognorm(s=self.sigma, scale=math.exp(self.mu)).cdf(x)
        return stats.uniform(self.low, self.high - self.low).cdf(x)

    def to_dict(self) -> dict:
        if self.kind == "lognormal":
            return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}
        return {"kind": "uniform", "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, data: dict) -> "Prior":
        data = dict(data)
        kind = data.pop("kind", "lognormal")
        unknown = set(data) - {"mu", "sigma", "low", "high"}
        if unknown:
            raise ConfigError(f"unknown prior fields {sorted(unknown)}")
        return cls(kind, **{k: float(v) for k, v in data.items()})


def _offset_rule(name: str) -> str | float:
    field_name = name.split(".")[-1]
    if field_name in ("eps_inf", "mu_s"):
        return 1.0
    if field_name == "eps_s":
        return name.rsplit(".", 1)[0] + ".eps_inf"
    return 0.0


class Parameterization:
    """Map between :class:`MaterialParams` and the free unconstrained vector ``u``.

    Parameters without a prior are held at their value in ``template``.
    """

    def __init__(self, template: MaterialParams, priors: dict[str, Prior]):
        self.template = template
        self.names = template.names
        unknown = set(priors) - set(self.names)
        if unknown:
            raise ConfigError(f"priors given for unknown parameters {sorted(unknown)}")
        self.free = [n for n in self.names if n in priors]
        self.priors = {n: priors[n] for n in self.free}
        self._index = {n: i for i, n in enumerate(self.names)}
        self._base = template.to_vector()

    @property
    def dim(self) -> int:
        return len(self.free)

    def _offset(self, name, values):
        rule = _offset_rule(name)
        return values[self._index[rule]] if isinstance(rule, str) else rule

    def to_u(self, psi: MaterialParams) -> np.ndarray:
        values = psi.to_vector()
        return np.array([self.priors[n].to_u(values[self._index[n]] - self._offset(n, values))
                         for n in self.free])

    def values(self, u) -> np.ndarray:
        values = self._base.copy()
        free = dict(zip(self.free, np.asarray(u, dtype=np.float64)))
        for i, name in enumerate(self.names):  # names are ordered so offsets come first
            if name in free:
                values[i] = self._offset(name, values) + self.priors[name].from_u(free[name])
        return values

    def to_psi(self, u) -> MaterialParams:
        return self.template.with_vector(self.values(u))

    def log_prior(self, u) -> float:
        return float(sum(self.priors[n].log_density_u(float(v)) for n, v in zip(self.free, u)))


def beta_at(iteration: int, schedule) -> float:
    """Piecewise-linear tempering exponent; constant beyond the schedule ends."""
    if not schedule:
        return 1.0
    its = [float(s[0]) for s in schedule]
    betas = [float(s[1]) for s in schedule]
    return float(np.interp(iteration, its, betas))


def temper(log_lik: float, iteration: int, schedule) -> float:
    beta = beta_at(iteration, schedule)
    if beta == 0.0:
        return 0.0
    return beta * log_lik


class AdaptiveProposal:
    """Mixture of a fixed isotropic random walk and an adapted-covariance walk.

    The empirical covariance of the chain history (Welford updates) is scaled
    by ``2.38^2 / d`` and refreshed every ``adapt_interval`` iterations from
    ``adapt_start`` on; adaptation freezes at ``adapt_stop``.
    """

    def __init__(self, dim: int, scale: float, weight_fixed: float, adapt_start: int,
                 adapt_interval: int, adapt_stop: int | None = None):
        self.dim = dim
        self.scale = scale
        self.weight_fixed = weight_fixed
        self.adapt_start = adapt_start
        self.adapt_interval = max(1, adapt_interval)
        self.adapt_stop = adapt_stop
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.chol: np.ndarray | None = None
        self.fallbacks = 0

    def adapting(self, iteration: int) -> bool:
        return self.adapt_stop is None or iteration < self.adapt_stop

    def observe(self, u, iteration: int) -> None:
        if not self.adapting(iteration):
            return
        u = np.asarray(u, dtype=np.float64)
        self.n += 1
        delta = u - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, u - self.mean)
        if iteration >= self.adapt_start and (iteration - self.adapt_start) % self.adapt_interval == 0:
            self.refresh()

    def refresh(self) -> None:
        if self.n < 2:
            return
        cov = self.m2 / (self.n - 1)
        cov = 0.5 * (cov + cov.T) * (2.38 ** 2 / self.dim)
        try:
            chol = np.linalg.cholesky(cov + 1e-12 * np.eye(self.dim))
        except np.linalg.LinAlgError:
            chol = None
        # cholesky propagates NaN silently, so check the factor as well
        if chol is None or not np.all(np.isfinite(chol)):
            self.chol = None
            self.fallbacks += 1
        else:
            self.chol = chol

    def propose(self, u, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        """Return ``(u_star, log q-ratio)``; the ratio is 0 (symmetric kernels)."""
        pick = rng.uniform()
        z = rng.standard_normal(self.dim)
        if self.chol is None or pick < self.weight_fixed:
            step = self.scale * z
        else:
            step = self.chol @ z
        return np.asarray(u) + step, 0.0


def propose(u, adapt_state: AdaptiveProposal, rng: np.random.Generator):
    return adapt_state.propose(u, rng)


@dataclass
class PmmhConfig:
    initial: MaterialParams
    priors: dict[str, Prior]
    model: DeviationModel
    n_iters: int = 1000
    n_particles: int = 100
    backend: str = "kf"
    ensemble_size: int = 100
    proposal_scale: float = 0.05
    adapt_start: int = 500
    adapt_stop: int | None = None
    adapt_interval: int = 100
    mixture_weight_fixed: float = 0.3
    tempering_schedule: list = field(default_factory=lambda: [(0, 1.0)])
    ess_threshold: float = 0.5
    seed: int = 0
    thin: int = 10
    n_threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        for name in ("n_particles", "ensemble_size", "adapt_interval", "thin", "n_threads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_iters < 0:
            raise ConfigError("n_iters must be non-negative")
        if self.backend == "kf" and self.n_particles < 2:
            raise ConfigError("the kf backend needs at least two particles")
        if not 0.0 <= self.mixture_weight_fixed <= 1.0:
            raise ConfigError("mixture_weight_fixed must lie in [0, 1]")
        if not self.proposal_scale > 0:
            raise ConfigError("proposal_scale must be positive")
        sched = [(int(i), float(b)) for i, b in self.tempering_schedule]
        if not sched:
            raise ConfigError("tempering schedule is empty")
        its = [i for i, _ in sched]
        betas = [b for _, b in sched]
        if its != sorted(its) or any(not 0.0 <= b <= 1.0 for b in betas):
            raise ConfigError("tempering schedule must have sorted iterations and beta in [0, 1]")
        if any(b2 < b1 for b1, b2 in zip(betas, betas[1:])):
            raise ConfigError("tempering beta must be non-decreasing")
        # a schedule that never leaves 0 samples the prior; anything else must end at 1
        if betas[-1] != 1.0 and any(betas):
            raise ConfigError("tempering schedule must end at beta = 1")
        self.tempering_schedule = sched
        if not self.priors:
            raise ConfigError("at least one parameter needs a prior")
        Parameterization(self.initial, self.priors)

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.to_dict(),
            "priors": {k: v.to_dict() for k, v in self.priors.items()},
            "model": self.model.to_dict(),
            "n_iters": self.n_iters,
            "n_particles": self.n_particles,
            "backend": self.backend,
            "ensemble_size": self.ensemble_size,
            "proposal_scale": self.proposal_scale,
            "adapt_start": self.adapt_start,
            "adapt_stop": self.adapt_stop,
            "adapt_interval": self.adapt_interval,
            "mixture_weight_fixed": self.mixture_weight_fixed,
            "tempering_schedule": [list(s) for s in self.tempering_schedule],
            "ess_threshold": self.ess_threshold,
            "seed": self.seed,
            "thin": self.thin,
            "n_threads": self.n_threads,
        }

    @classmethod
    def from_dict(cls, data: dict, *, model: DeviationModel | None = None) -> "PmmhConfig":
        data = dict(data)
        try:
            initial = MaterialParams.from_dict(data.pop("initial"))
            priors = {k: Prior.from_dict(v) for k, v in data.pop("priors").items()}
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from None
        if "model" in data:
            model = DeviationModel.from_dict(data.pop("model"))
        if model is None:
            raise ConfigError("config has no 'model' section and none was supplied")
        known = set(cls.__dataclass_fields__) - {"initial", "priors", "model"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(initial=initial, priors=priors, model=model, **data)


@dataclass
class ChainRecord:
    iter: int
    psi: MaterialParams
    log_lik_hat: float
    log_prior: float
    accepted: bool
    acceptance_rate: float
    beta: float = 1.0
    rho_path: np.ndarray | None = None
    delta_x: np.ndarray | None = None


@dataclass
class Chain:
    records: list[ChainRecord]
    names: list[str]
    free: list[str]
    backend: str
    counters: dict[str, int]
    diagnostics: list[dict] = field(default_factory=list)
    smc_summary: list[dict] = field(default_factory=list)
    final_rho_path: np.ndarray | None = None

    def values(self, burn_in: int = 0) -> np.ndarray:
        """Parameter matrix ``(n_records, n_params)`` for iterations > ``burn_in``."""
        rows = [r.psi.to_vector() for r in self.records if r.iter > burn_in]
        return np.array(rows).reshape(-1, len(self.names))

    @property
    def acceptance_rate(self) -> float:
        return self.records[-1].acceptance_rate if self.records else 0.0


def pmmh_run(config: PmmhConfig, dataset: Dataset, *, diagnostics: bool = False,
             callback: Callable[[ChainRecord], None] | None = None) -> Chain:
    """Run the adaptive PMMH chain.

    The likelihood estimate of the incumbent is stored and reused; exactly
    ``n_iters + 1`` SMC runs are made. Degenerate SMC runs count as rejections.
    """
    model = config.model
    param = Parameterization(config.initial, config.priors)
    root = np.random.SeedSequence(config.seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    pre = precompute(dataset, model) if config.backend == "kf" else None
    counters = {"smc_calls": 0, "degenerate": 0, "resample_events": 0, "regularized": 0,
                "accepted": 0}
    diag_rows: list[dict] = []
    summary: list[dict] = []

    def run_smc(psi, it) -> SmcResult:
        counters["smc_calls"] += 1
        srng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1, it)))
        if config.backend == "kf":
            res = smc_run(psi, dataset, model, config.n_particles, srng, pre=pre,
                          ess_threshold=config.ess_threshold, n_threads=config.n_threads,
                          sample_path=False)
        else:
            res = smc_run_enkf(psi, dataset, model, config.n_particles, config.ensemble_size, srng,
                               ess_threshold=config.ess_threshold, n_threads=config.n_threads)
        counters["resample_events"] += res.n_resample
        counters["regularized"] += res.n_regularized
        summary.append({"iter": it, "log_lik_hat": float(res.log_lik_hat),
                        "ess_min": float(np.min(res.ess_trace)), "n_resample": res.n_resample})
        if diagnostics:
            for k in range(len(res.ess_trace)):
                row = {"iter": it, "k": k + 1, "ess": float(res.ess_trace[k]),
                       "resampled": int(res.resample_flags[k])}
                if res.spread_trace is not None:
                    row["spread"] = float(res.spread_trace[k])
                diag_rows.append(row)
        return res

    u = param.to_u(config.initial)
    # keep the configured values exactly; a u round trip can move them by an ulp
    psi = config.initial
    lp = param.log_prior(u)
    try:
        current = run_smc(psi, 0)
    except DegenerateLikelihoodError as exc:
        raise DegenerateLikelihoodError(exc.step, f"initial parameters give a degenerate likelihood: {exc}")
    ll = current.log_lik_hat
    paths_cache: dict = {}

    proposal = AdaptiveProposal(param.dim, config.proposal_scale, config.mixture_weight_fixed,
                                config.adapt_start, config.adapt_interval, config.adapt_stop)
    proposal.observe(u, 0)
    records: list[ChainRecord] = []
    for it in range(1, config.n_iters + 1):
        u_star, log_q = proposal.propose(u, rng)
        log_u = math.log(rng.uniform())
        accepted = False
        lp_star = param.log_prior(u_star)
        psi_star = None
        if np.all(np.isfinite(u_star)) and math.isfinite(lp_star):
            try:
                psi_star = param.to_psi(u_star)
            except (ValueError, OverflowError):
                psi_star = None
        beta = beta_at(it, config.tempering_schedule)
        if psi_star is not None:
            try:
                cand = run_smc(psi_star, it)
            except DegenerateLikelihoodError as exc:
                counters["degenerate"] += 1
                log.info("iteration %d: degenerate likelihood at step %d, rejecting", it, exc.step)
                cand = None
            if cand is not None and math.isfinite(cand.log_lik_hat):
                log_alpha = (temper(cand.log_lik_hat, it, config.tempering_schedule)
                             - temper(ll, it, config.tempering_schedule) + lp_star - lp - log_q)
                if log_u < log_alpha:
                    accepted = True
                    u, psi, lp, ll, current = u_star, psi_star, lp_star, cand.log_lik_hat, cand
                    counters["accepted"] += 1
        proposal.observe(u, it)
        rec = ChainRecord(it, psi, ll, lp, accepted, counters["accepted"] / it, beta)
        if it % config.thin == 0:
            rec.rho_path = current.sampled_rho_path
            rec.delta_x = _path_for(current, psi, dataset, model, paths_cache)
        records.append(rec)
        if callback is not None:
            callback(rec)
    counters["adapt_fallbacks"] = proposal.fallbacks
    return Chain(records, param.names, param.free, config.backend, counters, diag_rows, summary,
                 current.sampled_rho_path)


def _path_for(res: SmcResult, psi, dataset, model, cache) -> np.ndarray:
    if res.sampled_delta_x is not None:
        return res.sampled_delta_x
    if cache.get("res") is not res:
        cache["res"] = res
        cache["path"] = sample_delta_path(psi, res.sampled_rho_path, dataset, model,
                                          np.random.default_rng(res.path_seed))
    return cache["path"]
