import math

import numpy as np
import pytest
from scipy import integrate

from somnus.data import SufficientStats
from somnus.diagnostics import effective_sample_size
from somnus.model import PriorSpec
from somnus.sampler import (NUTS, DualAveraging, FitWarning, SamplerConfig, SamplerError, _Point, run_chain,
                            run_chains, sample)

EMPTY = SufficientStats([], np.zeros((0, 2, 2, 3)), np.zeros((0, 2)), np.zeros((0, 2)))


def std_normal(q):
    return -0.5 * float(q @ q), -q


def mc_se(x):
    """Monte Carlo standard error of the mean of (chains, draws) samples."""
    return x.std() / math.sqrt(effective_sample_size(x))


@pytest.fixture(scope="module")
def prior_fit():
    cfg = SamplerConfig(n_chains=4, n_warmup=500, n_samples=1000, rng_seed=3)
    return sample(EMPTY, PriorSpec(), cfg, n_factors=0), cfg


def test_prior_only_mu(prior_fit):
    draws, _ = prior_fit
    mu = draws.mu
    for j in range(4):
        x = mu[..., j]
        assert abs(x.mean()) < 3 * mc_se(x)
        assert x.std() == pytest.approx(5.0, rel=0.1)


def test_dual_averaging_reaches_target():
    # acceptance falls smoothly with the step size; the adapted step should hit the target
    da = DualAveraging(0.8)
    da.mu = math.log(10.0)
    eps = 1.0
    for _ in range(2000):
        eps = da.update(math.exp(-eps))
    assert math.exp(-da.final()) == pytest.approx(0.8, abs=0.02)


def test_draw_shapes(prior_fit):
    draws, cfg = prior_fit
    assert draws.draws.shape == (cfg.n_chains, cfg.n_samples, 20)
    assert np.all(draws.lam > 0) and np.all(draws.omega2 > 0)


def test_single_patient_rate_matches_quadrature():
    v, t = 20.0, 1000.0
    stats = SufficientStats(["p"], np.zeros((1, 2, 2, 3)), np.array([[v, 0.0]]), np.array([[t, 0.0]]))
    # inverse-gamma(2000, 0.002) pins omega^2 near 1e-6 so phi is negligible
    priors = PriorSpec(omega2_shape=2000.0, omega2_scale=2000.0 * 1e-6)
    cfg = SamplerConfig(n_chains=4, n_warmup=500, n_samples=1000, rng_seed=7)
    draws = sample(stats, priors, cfg, n_factors=0)

    def unnorm(lam):
        return lam ** (priors.lambda_shape - 1 + v) * math.exp(-(priors.lambda_rate + t) * lam)

    z, _ = integrate.quad(unnorm, 0, 1, points=[0.02], limit=200)
    m1, _ = integrate.quad(lambda x: x * unnorm(x), 0, 1, points=[0.02], limit=200)
    assert draws.lam[..., 0].mean() == pytest.approx(m1 / z, rel=0.02)


def test_two_dimensional_normal():
    cfg = SamplerConfig(n_chains=4, n_warmup=300, n_samples=1500, rng_seed=11)
    draws, *_ = run_chains(std_normal, 2, cfg)
    for j in range(2):
        x = draws[..., j]
        assert abs(x.mean()) < 3 * mc_se(x)
        sq = x ** 2
        assert abs(sq.mean() - 1.0) < 3 * mc_se(sq)
    prod = draws[..., 0] * draws[..., 1]
    assert abs(prod.mean()) < 3 * mc_se(prod)


def test_energy_error_scales_quadratically():
    def banana(q):
        # a non-Gaussian smooth target so the leapfrog error is not trivially periodic
        lp = -0.5 * q[0] ** 2 - 0.5 * (q[1] - 0.5 * q[0] ** 2) ** 2
        g = np.array([-q[0] + (q[1] - 0.5 * q[0] ** 2) * q[0], -(q[1] - 0.5 * q[0] ** 2)])
        return lp, g

    kernel = NUTS(banana, 2, np.random.default_rng(0))
    q0, p0 = np.array([0.7, -0.3]), np.array([0.4, 1.1])
    lp, g = banana(q0)
    z0 = _Point(q0, p0, lp, g)
    H0 = kernel.energy(z0)
    drift = []
    for h in (0.1, 0.05, 0.025):
        z = z0
        worst = 0.0
        for _ in range(int(round(2.0 / h))):
            z = kernel.leapfrog(z, h)
            worst = max(worst, abs(kernel.energy(z) - H0))
        drift.append(worst)
    ratios = np.array(drift[:-1]) / np.array(drift[1:])
    assert np.all((ratios > 3.0) & (ratios < 5.0))


def test_draws_are_deterministic():
    cfg = SamplerConfig(n_chains=2, n_warmup=50, n_samples=50, rng_seed=5)
    a = sample(EMPTY, PriorSpec(), cfg, n_factors=1)
    b = sample(EMPTY, PriorSpec(), cfg, n_factors=1)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.step_size, b.step_size)


def test_parallel_workers_do_not_change_output():
    cfg = SamplerConfig(n_chains=3, n_warmup=40, n_samples=30, rng_seed=9)
    serial = run_chains(std_normal, 3, cfg)[0]
    cfg.n_workers = 3
    parallel = run_chains(std_normal, 3, cfg)[0]
    np.testing.assert_array_equal(serial, parallel)


def test_each_chain_has_its_own_stream():
    cfg = SamplerConfig(n_chains=3, n_warmup=40, n_samples=30, rng_seed=9)
    all_chains = run_chains(std_normal, 3, cfg)[0]
    alone = run_chain(std_normal, 3, cfg, chain=2)[0]
    np.testing.assert_array_equal(all_chains[2], alone)
    assert not np.array_equal(all_chains[0], all_chains[1])


def test_divergences_are_flagged_but_returned():
    cfg = SamplerConfig(n_chains=1, n_warmup=20, n_samples=40, rng_seed=1, max_delta_energy=1e-9)
    with pytest.warns(FitWarning, match="divergence"):
        draws = sample(EMPTY, PriorSpec(), cfg, n_factors=0)
    assert draws.divergence_rate() > 0.1
    assert draws.warnings
    assert draws.draws.shape == (1, 40, 20)


def test_nonfinite_start_aborts():
    def broken(q):
        return -math.inf, np.zeros_like(q)

    with pytest.raises(SamplerError, match="100"):
        run_chain(broken, 2, SamplerConfig(n_chains=1, n_warmup=1, n_samples=1), 0)


@pytest.mark.parametrize("kw", [dict(n_chains=0), dict(n_samples=0), dict(target_accept=1.0),
                                dict(target_accept=0.0), dict(n_warmup=-1)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)


def test_config_json_refuses_unknown_keys():
    assert SamplerConfig.from_json({"n_chains": 2}).n_chains == 2
    with pytest.raises(ValueError):
        SamplerConfig.from_json({"chains": 2})
