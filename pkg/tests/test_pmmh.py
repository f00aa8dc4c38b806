import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import exp_kernel_cov, fd_toy, finite_difference_jacobian, prior_path_cov, random_dataset, toy_psi
from rbpmmh.material import material_eval_many
from rbpmmh.pmmh import (AdaptiveProposal, ConfigError, Parameterization, PmmhConfig, Prior, beta_at, pmmh_run,
                         propose, temper)
from rbpmmh.ssm import Dataset

FD = "debye[0].f_d"


@pytest.fixture(scope="module")
def toy():
    return fd_toy()


def toy_config(model, prior, **kw):
    base = dict(n_iters=200, n_particles=2, proposal_scale=0.3, adapt_start=100, thin=50)
    base.update(kw)
    return PmmhConfig(toy_psi(), {FD: prior}, model, **base)


# ---------------------------------------------------------------------------
# tempering


def test_temper_examples():
    assert temper(-12.5, 7, [(0, 1.0)]) == -12.5
    assert temper(-12.5, 7, [(0, 0.0)]) == 0.0
    assert beta_at(500, [(0, 0.2), (1000, 1.0)]) == pytest.approx(0.6)
    assert temper(-10.0, 500, [(0, 0.2), (1000, 1.0)]) == pytest.approx(-6.0)
    assert beta_at(5000, [(0, 0.2), (1000, 1.0)]) == 1.0


def test_temper_of_infinite_loglik_at_zero_beta():
    assert temper(-math.inf, 3, [(0, 0.0)]) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 5000), st.floats(0.0, 1.0), st.integers(1, 4000))
def test_beta_is_monotone_and_bounded(it, b0, end):
    sched = [(0, b0), (end, 1.0)]
    assert b0 - 1e-12 <= beta_at(it, sched) <= 1.0
    assert beta_at(it, sched) <= beta_at(it + 1, sched) + 1e-12


# ---------------------------------------------------------------------------
# parameterization and priors


def test_parameterization_roundtrip_and_offsets():
    psi = toy_psi()
    priors = {n: Prior() for n in psi.names}
    par = Parameterization(psi, priors)
    u = par.to_u(psi)
    np.testing.assert_allclose(par.values(u), psi.to_vector(), rtol=1e-12)
    # any u maps to a valid parameter set respecting the orderings
    for z in np.random.default_rng(0).normal(0, 3, (200, 6)):
        v = par.values(z)
        assert v[0] >= 1.0 and v[1] >= v[0] and v[3] >= 1.0 and np.all(v[[2, 4, 5]] > 0)


def test_uniform_prior_roundtrip():
    p = Prior("uniform", low=0.5, high=4.0)
    for x in (0.6, 1.0, 3.9):
        assert p.from_u(p.to_u(x)) == pytest.approx(x, rel=1e-12)


@pytest.mark.parametrize("prior", [Prior("lognormal", 0.3, 0.7), Prior("uniform", low=0.5, high=4.0)])
def test_u_density_is_change_of_variables(prior):
    # density of u must equal density of excess times |d excess / du|
    for u in np.linspace(-2.0, 2.0, 9):
        jac = finite_difference_jacobian(lambda z: np.array([prior.from_u(z[0])]), [u])[0, 0]
        x = prior.from_u(u)
        if prior.kind == "lognormal":
            dens = stats.lognorm(s=prior.sigma, scale=math.exp(prior.mu)).pdf(x)
        else:
            dens = stats.uniform(prior.low, prior.high - prior.low).pdf(x)
        assert prior.log_density_u(u) == pytest.approx(math.log(dens * abs(jac)), abs=1e-6)


def test_prior_config_errors():
    with pytest.raises(ConfigError):
        Prior("gamma")
    with pytest.raises(ConfigError):
        Prior("lognormal", sigma=0.0)
    with pytest.raises(ConfigError):
        Prior("uniform", low=2.0, high=1.0)
    with pytest.raises(ConfigError):
        Prior.from_dict({"kind": "lognormal", "scale": 1})
    with pytest.raises(ConfigError):
        Parameterization(toy_psi(), {"debye[3].f_d": Prior()})


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("bad", [
    dict(backend="ukf"),
    dict(n_particles=0),
    dict(n_particles=1),
    dict(thin=0),
    dict(n_iters=-1),
    dict(mixture_weight_fixed=1.5),
    dict(proposal_scale=0.0),
    dict(tempering_schedule=[]),
    dict(tempering_schedule=[(0, 0.5), (100, 0.2)]),
    dict(tempering_schedule=[(100, 0.5), (0, 1.0)]),
    dict(tempering_schedule=[(0, 0.2), (100, 0.8)]),
    dict(tempering_schedule=[(0, 1.5)]),
])
def test_config_rejects_invalid(toy, bad):
    _, model, prior, _, _ = toy
    with pytest.raises(ConfigError):
        toy_config(model, prior, **bad)


def test_config_dict_roundtrip(toy):
    _, model, prior, _, _ = toy
    cfg = toy_config(model, prior, tempering_schedule=[(0, 0.2), (100, 1.0)])
    back = PmmhConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        PmmhConfig.from_dict({**cfg.to_dict(), "n_chains": 3})
    data = cfg.to_dict()
    del data["model"]
    with pytest.raises(ConfigError):
        PmmhConfig.from_dict(data)


# ---------------------------------------------------------------------------
# proposal


def test_fixed_kernel_steps_are_isotropic_normal():
    prop = AdaptiveProposal(3, 0.2, 1.0, adapt_start=0, adapt_interval=1)
    rng = np.random.default_rng(0)
    u = np.array([0.5, -1.0, 2.0])
    steps = []
    for it in range(20_000):
        prop.observe(rng.standard_normal(3) * 5.0, it)
        u_star, lq = propose(u, prop, rng)
        assert lq == 0.0
        steps.append(u_star - u)
    steps = np.array(steps)
    np.testing.assert_allclose(np.cov(steps.T), 0.04 * np.eye(3), atol=0.002)
    for j in range(3):
        assert stats.kstest(steps[:, j] / 0.2, "norm").pvalue > 1e-3


def test_adapted_kernel_uses_scaled_history_covariance():
    rng = np.random.default_rng(1)
    prop = AdaptiveProposal(2, 0.1, 0.0, adapt_start=10, adapt_interval=10)
    C = np.array([[1.0, 0.6], [0.6, 2.0]])
    hist = rng.multivariate_normal(np.zeros(2), C, size=50_001)
    for it, h in enumerate(hist):
        prop.observe(h, it)
    target = 2.38 ** 2 / 2 * C
    np.testing.assert_allclose(prop.chol @ prop.chol.T, target, rtol=0.05, atol=0.05)


def test_singular_history_falls_back_to_fixed_kernel():
    prop = AdaptiveProposal(2, 0.1, 0.0, adapt_start=1, adapt_interval=1)
    for it in range(5):
        prop.observe(np.array([np.nan, 1.0]), it)
    assert prop.chol is None and prop.fallbacks > 0
    u_star, _ = prop.propose(np.zeros(2), np.random.default_rng(0))
    assert np.all(np.isfinite(u_star))
    prop = AdaptiveProposal(2, 0.1, 0.0, adapt_start=10 ** 6, adapt_interval=1)
    prop.n, prop.m2 = 3, np.array([[1.0, 0.0], [0.0, -1.0]])
    prop.refresh()
    assert prop.chol is None and prop.fallbacks == 1


def test_adaptation_freezes():
    prop = AdaptiveProposal(1, 0.1, 0.5, adapt_start=2, adapt_interval=1, adapt_stop=10)
    for it in range(20):
        prop.observe(np.array([float(it)]), it)
    assert prop.n == 10


# ---------------------------------------------------------------------------
# chain behaviour


def test_stored_estimate_discipline(toy, monkeypatch):
    ds, model, prior, _, _ = toy
    from rbpmmh import pmmh

    calls = []
    real = pmmh.smc_run

    def counting(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(pmmh, "smc_run", counting)
    chain = pmmh_run(toy_config(model, prior, n_iters=150), ds)
    assert len(calls) == 151 == chain.counters["smc_calls"]
    assert len(chain.smc_summary) == 151


def test_rejected_records_copy_psi_bitwise(toy):
    ds, model, prior, _, _ = toy
    chain = pmmh_run(toy_config(model, prior, n_iters=300, proposal_scale=1.0), ds)
    assert 0 < chain.counters["accepted"] < 300
    prev = toy_psi()
    for rec in chain.records:
        if not rec.accepted:
            assert rec.psi.to_vector().tobytes() == prev.to_vector().tobytes()
            assert rec.psi == prev
        prev = rec.psi
    rates = np.cumsum([r.accepted for r in chain.records]) / np.arange(1, 301)
    np.testing.assert_allclose([r.acceptance_rate for r in chain.records], rates)


def test_chain_is_deterministic(toy):
    ds, model, prior, _, _ = toy
    a = pmmh_run(toy_config(model, prior, seed=4), ds)
    b = pmmh_run(toy_config(model, prior, seed=4), ds)
    c = pmmh_run(toy_config(model, prior, seed=5), ds)
    np.testing.assert_array_equal(a.values(), b.values())
    assert [r.log_lik_hat for r in a.records] == [r.log_lik_hat for r in b.records]
    assert not np.array_equal(a.values(), c.values())


def test_thread_count_does_not_change_chain():
    ds, model, _, _ = random_dataset(np.random.default_rng(3), 2, 4, 3, sigma_rho=0.4)
    cfg = dict(initial=toy_psi(), priors={FD: Prior("lognormal", math.log(2e9), 0.5)}, model=model,
               n_iters=60, n_particles=12, thin=20)
    a = pmmh_run(PmmhConfig(**cfg, n_threads=1), ds)
    b = pmmh_run(PmmhConfig(**cfg, n_threads=4), ds)
    np.testing.assert_array_equal(a.values(), b.values())
    for ra, rb in zip(a.records, b.records):
        assert ra.log_lik_hat == rb.log_lik_hat
        if ra.delta_x is not None:
            np.testing.assert_array_equal(ra.delta_x, rb.delta_x)
            np.testing.assert_array_equal(ra.rho_path, rb.rho_path)


def test_thinned_paths(toy):
    ds, model, prior, _, _ = toy
    chain = pmmh_run(toy_config(model, prior, n_iters=100, thin=25), ds)
    with_paths = [r.iter for r in chain.records if r.delta_x is not None]
    assert with_paths == [25, 50, 75, 100]
    rec = chain.records[24]
    assert rec.delta_x.shape == (4, 8) and rec.rho_path.shape == (4,)
    np.testing.assert_array_equal(rec.rho_path, 0.6)


def test_enkf_backend_runs(toy):
    ds, model, prior, _, _ = toy
    chain = pmmh_run(toy_config(model, prior, n_iters=40, backend="enkf", n_particles=2, ensemble_size=30), ds)
    assert chain.backend == "enkf"
    assert chain.counters["smc_calls"] == 41
    assert all(np.isfinite(r.log_lik_hat) for r in chain.records)


def test_degenerate_candidates_count_as_rejections(toy, monkeypatch):
    ds, model, prior, _, _ = toy
    from rbpmmh import pmmh
    from rbpmmh.rbsmc import DegenerateLikelihoodError

    real = pmmh.smc_run
    state = {"n": 0}

    def flaky(*a, **kw):
        state["n"] += 1
        if state["n"] > 1 and state["n"] % 2 == 0:
            raise DegenerateLikelihoodError(2, "forced")
        return real(*a, **kw)

    monkeypatch.setattr(pmmh, "smc_run", flaky)
    chain = pmmh_run(toy_config(model, prior, n_iters=40), ds)
    assert chain.counters["degenerate"] == 20
    assert len(chain.records) == 40


def test_prior_only_chain_reproduces_prior():
    # every free parameter of the 2-term model, beta = 0 throughout
    ds, model, _, _ = random_dataset(np.random.default_rng(0), 2, 4, 3)
    priors = {
        "debye[0].eps_inf": Prior("lognormal", 0.5, 0.4),
        "debye[0].eps_s": Prior("uniform", low=1.0, high=8.0),
        "debye[0].f_d": Prior("lognormal", math.log(2e9), 0.5),
        "lorentz[0].mu_s": Prior("lognormal", 0.0, 0.5),
    }
    cfg = PmmhConfig(toy_psi(), priors, model, n_iters=40_000, n_particles=2, proposal_scale=0.8,
                     adapt_start=1000, tempering_schedule=[(0, 0.0)], thin=10_000, seed=2)
    chain = pmmh_run(cfg, ds)
    par = Parameterization(toy_psi(), priors)
    u = np.array([par.to_u(r.psi) for r in chain.records if r.iter > 2000])
    vals = chain.values(2000)
    names = chain.names
    for j, name in enumerate(par.free):
        p = priors[name]
        offset = vals[:, names.index("debye[0].eps_inf")] if name.endswith("eps_s") else (
            1.0 if name.endswith(("eps_inf", "mu_s")) else 0.0)
        excess = vals[:, names.index(name)] - offset
        # moment check in u space with batch-means standard errors
        x = u[:, j]
        target = p.mu if p.kind == "lognormal" else 0.0
        batches = x[: x.size // 50 * 50].reshape(50, -1).mean(axis=1)
        se = batches.std(ddof=1) / np.sqrt(50)
        assert abs(x.mean() - target) < 3 * se + 1e-12, name
        # Jacobian check in the original space: excess quantiles match the prior
        qs = np.array([0.1, 0.25, 0.5, 0.75, 0.9])
        emp = p.excess_cdf(np.quantile(excess, qs))
        np.testing.assert_allclose(emp, qs, atol=0.04, err_msg=name)


def test_adaptive_chain_reaches_target_acceptance(toy):
    ds, model, prior, _, _ = toy
    # deliberately poor fixed scale: far too wide for the posterior
    cfg = toy_config(model, prior, n_iters=5000, proposal_scale=3.0, mixture_weight_fixed=0.05,
                     adapt_start=200, adapt_interval=50, thin=5000)
    adapted = pmmh_run(cfg, ds)
    late = np.mean([r.accepted for r in adapted.records[-2000:]])
    assert 0.15 <= late <= 0.5
    fixed = pmmh_run(toy_config(model, prior, n_iters=5000, proposal_scale=3.0, mixture_weight_fixed=1.0,
                                thin=5000), ds)
    assert np.mean([r.accepted for r in fixed.records[-2000:]]) < 0.15


def test_geweke_successive_conditional():
    # alternating y ~ p(y | psi) and a few PMMH steps leaves the prior invariant
    ds, model, prior, _, _ = fd_toy()
    mm = ds.metamodel
    L = np.linalg.cholesky(prior_path_cov(np.full(4, 0.6), exp_kernel_cov(2, 0.3, 2.0)))
    noise_sd = np.sqrt(np.diagonal(mm.R, axis1=1, axis2=2))
    rng = np.random.default_rng(0)
    values = toy_psi().to_vector()
    values[2] = prior.sample_excess(rng)
    psi = toy_psi().with_vector(values)
    draws = []
    for step in range(3000):
        dx = (L @ rng.standard_normal(32)).reshape(4, 8)
        g = material_eval_many(psi, ds.frequencies, 2)
        y = np.einsum("kij,kj->ki", mm.A, g + dx) + mm.y0 + noise_sd * rng.standard_normal((4, 3))
        cfg = PmmhConfig(psi, {FD: prior}, model, n_iters=3, n_particles=2, proposal_scale=0.15,
                         adapt_start=10 ** 9, mixture_weight_fixed=1.0, thin=100, seed=step)
        psi = pmmh_run(cfg, Dataset(ds.frequencies, y, mm)).records[-1].psi
        draws.append(math.log(psi.to_vector()[2]) - prior.mu)
    x = np.array(draws)
    for stat, target in ((x, 0.0), (x ** 2, prior.sigma ** 2)):
        batches = stat.reshape(30, -1).mean(axis=1)
        se = batches.std(ddof=1) / np.sqrt(30)
        assert abs(stat.mean() - target) < 3 * se
