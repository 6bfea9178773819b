import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps
from scipy.special import softmax

from oracles import central_difference
from somnus.data import NREM, REM, SufficientStats, derive_sufficient_stats
from somnus.model import (Layout, ModelParams, Posterior, PriorSpec, UnconstrainedState, grad_log_posterior,
                          log_likelihood, log_posterior, transition_probs)
from somnus.simulate import ScenarioConfig, generate_scenario

EMPTY = SufficientStats([], np.zeros((0, 2, 2, 3)), np.zeros((0, 2)), np.zeros((0, 2)))


def one_patient(counts=None, events=(0, 0), exposure=(0, 0), pid="p"):
    c = np.zeros((1, 2, 2, 3)) if counts is None else np.asarray(counts, float).reshape(1, 2, 2, 3)
    return SufficientStats([pid], c, np.array([events], float), np.array([exposure], float))


def small_stats(n=5, seed=0):
    records, _ = generate_scenario(ScenarioConfig(n_patients=n, n_epochs=200, rng_seed=seed))
    return derive_sufficient_stats(records)


# ---------------------------------------------------------------------------
# transition probabilities


def test_zero_logits_are_uniform():
    p = transition_probs(np.zeros(4), np.zeros(4), np.zeros(10), 0, REM)
    np.testing.assert_allclose(p, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_saturated_logits_keep_stage():
    mu = np.array([-20.0, -20.0, 0.0, 0.0])
    p = transition_probs(mu, np.zeros(4), np.zeros(10), 0, REM)
    assert p[REM] >= 1 - 1e-8


def test_hand_softmax():
    mu = np.array([-2.0, -3.0, 0.0, 0.0])
    tau = np.array([1.0, 0.0, 0.0, 0.0])
    theta = np.zeros(10)
    theta[0] = 0.5
    theta[4] = -0.25
    p = transition_probs(mu, tau, theta, 1, REM)
    # logits (Awake, NonREM, REM-self) = (-0.75, -3, 0)
    e = np.exp([-0.75, -3.0, 0.0])
    expected = np.array([e[0], e[2], e[1]]) / e.sum()
    np.testing.assert_allclose(p, expected, rtol=1e-14)


def test_transitions_out_of_awake_are_refused():
    with pytest.raises(ValueError):
        transition_probs(np.zeros(4), np.zeros(4), np.zeros(10), 0, 0)


finite = st.floats(-30, 30, allow_nan=False)


@given(st.lists(finite, min_size=4, max_size=4), st.lists(finite, min_size=4, max_size=4),
       st.lists(finite, min_size=10, max_size=10), st.sampled_from([0, 1]), st.sampled_from([REM, NREM]),
       st.floats(-50, 50))
def test_probabilities_sum_to_one_and_ignore_common_shift(mu, tau, theta, h, k_o, c):
    p = transition_probs(mu, tau, theta, h, k_o)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    # reference: explicit three-logit softmax with a common shift c
    o = k_o - 1
    mu_o, tau_o = np.reshape(mu, (2, 2))[o], np.reshape(tau, (2, 2))[o]
    g, a = np.reshape(theta[0:4], (2, 2))[o], np.reshape(theta[4:8], (2, 2))[o]
    logits = np.zeros(3)
    dest = [(0, 2), (0, 1)][o]
    logits[list(dest)] = mu_o + g + (tau_o + a) * h
    np.testing.assert_allclose(p, softmax(logits + c), rtol=1e-10, atol=1e-15)


# ---------------------------------------------------------------------------
# likelihood


def test_empty_likelihood_is_zero():
    assert log_likelihood(EMPTY, np.zeros(4), np.zeros(4), np.ones(2), np.zeros((0, 10))) == 0.0


def test_likelihood_hand_example():
    c = np.zeros((2, 2, 3))
    c[0, 1] = (0, 1, 1)  # from NonREM without an event: one to REM, one stay
    t = (30.0, 60.0)
    lam = np.array([0.02, 0.03])
    s = one_patient(c, (0, 0), t)
    ll = log_likelihood(s, np.zeros(4), np.zeros(4), lam, np.zeros(10))
    assert ll == pytest.approx(2 * math.log(1 / 3) - (30 * 0.02 + 60 * 0.03), rel=1e-14)


def test_single_event_poisson_term():
    s = one_patient(None, (1, 0), (100.0, 0.0))
    ll = log_likelihood(s, np.zeros(4), np.zeros(4), np.array([0.02, 0.5]), np.zeros(10))
    assert ll == pytest.approx(math.log(2) - 2, rel=1e-14)


def test_events_without_exposure_are_an_error():
    s = one_patient(None, (0, 2), (30.0, 0.0))
    with pytest.raises(ValueError, match="zero exposure"):
        log_likelihood(s, np.zeros(4), np.zeros(4), np.ones(2), np.zeros(10))
    with pytest.raises(ValueError):
        Posterior(s)


def test_likelihood_is_additive_over_patients():
    s = small_stats(2, seed=3)
    rng = np.random.default_rng(0)
    mu, tau, lam, theta = rng.normal(size=4), rng.normal(size=4), np.array([0.02, 0.01]), rng.normal(size=(2, 10))
    singles = [SufficientStats([s.patient_ids[i]], s.counts[i:i + 1], s.events[i:i + 1], s.exposure[i:i + 1])
               for i in range(2)]
    total = log_likelihood(s, mu, tau, lam, theta)
    parts = sum(log_likelihood(si, mu, tau, lam, theta[i]) for i, si in enumerate(singles))
    assert total == pytest.approx(parts, rel=1e-13)


# ---------------------------------------------------------------------------
# posterior


def prior_oracle(p: PriorSpec, mu, tau, lam, L, omega2):
    """Sum of prior log-densities plus the log-Jacobians of the log transforms."""
    out = sps.norm.logpdf(mu, p.mu_mean, p.mu_sd).sum() + sps.norm.logpdf(tau, p.tau_mean, p.tau_sd).sum()
    out += sps.gamma.logpdf(lam, p.lambda_shape, scale=1 / p.lambda_rate).sum() + np.log(lam).sum()
    out += sps.norm.logpdf(L, 0, p.loading_sd).sum()
    out += sps.invgamma.logpdf(omega2, p.omega2_shape, scale=p.omega2_scale).sum() + np.log(omega2).sum()
    return out


@pytest.mark.parametrize("k", [0, 1, 3])
def test_prior_means_with_empty_data(k):
    p = PriorSpec()
    layout = Layout(0, k)
    lam = np.full(2, p.lambda_shape / p.lambda_rate)
    omega2 = np.full(10, p.omega2_scale / (p.omega2_shape - 1))
    params = ModelParams(np.zeros(4), np.zeros(4), lam, np.zeros((10, k)), np.zeros((0, k)), omega2,
                         np.zeros((0, 10)))
    x = layout.pack(params)
    got = log_posterior(UnconstrainedState(x, layout), EMPTY, p)
    assert got == pytest.approx(prior_oracle(p, params.mu, params.tau, lam, params.loadings, omega2), rel=1e-12)


def test_log_lambda_shift_adds_jacobian():
    p = PriorSpec()
    post = Posterior(EMPTY, p, 0)
    rng = np.random.default_rng(1)
    x = rng.normal(size=post.dim)
    c = 0.3
    y = x.copy()
    y[post.layout.blocks["log_lambda"]][0] += c
    lam0, lam1 = math.exp(x[8]), math.exp(y[8])
    expected = (sps.gamma.logpdf(lam1, p.lambda_shape, scale=1 / p.lambda_rate)
                - sps.gamma.logpdf(lam0, p.lambda_shape, scale=1 / p.lambda_rate) + c)
    assert post.log_density(y) - post.log_density(x) == pytest.approx(expected, rel=1e-10)


def test_no_factors_unit_variance_is_standard_normal_effects():
    s = one_patient(None, (0, 0), (0.0, 0.0))
    post = Posterior(s, PriorSpec(), 0)
    rng = np.random.default_rng(2)
    x = rng.normal(size=post.dim)
    x[post.layout.blocks["log_omega2"]] = 0.0
    z = x[post.layout.blocks["z"]]
    params = post.layout.unpack(x)
    np.testing.assert_allclose(params.theta.ravel(), z)
    expected = prior_oracle(post.priors, params.mu, params.tau, params.lam, params.loadings, params.omega2)
    expected += sps.norm.logpdf(z).sum()
    assert post.log_density(x) == pytest.approx(expected, rel=1e-12)


def test_factor_permutation_and_sign_flip_invariance():
    s = small_stats(4, seed=1)
    post = Posterior(s, PriorSpec(), 3)
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.normal(scale=0.5, size=post.dim)
        p = post.layout.unpack(x)
        perm = rng.permutation(3)
        signs = rng.choice([-1.0, 1.0], size=3)
        q = ModelParams(p.mu, p.tau, p.lam, p.loadings[:, perm] * signs, p.eta[:, perm] * signs, p.omega2, p.z)
        np.testing.assert_allclose(q.theta, p.theta, atol=1e-12)
        assert post.log_density(post.layout.pack(q)) == pytest.approx(post.log_density(x), rel=1e-12)


def test_compiled_kernel_matches_numpy_reference():
    s = small_stats(5, seed=2)
    post = Posterior(s, PriorSpec(), 3)
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = rng.normal(scale=0.7, size=post.dim)
        v, g = post.value_and_grad(x)
        v_ref, g_ref = post._evaluate_numpy(x, True)
        assert v == pytest.approx(v_ref, rel=1e-12)
        np.testing.assert_allclose(g, g_ref, rtol=1e-10, atol=1e-10)


def test_nonfinite_state_gives_minus_infinity():
    post = Posterior(small_stats(2), PriorSpec(), 1)
    x = np.zeros(post.dim)
    x[post.layout.blocks["log_omega2"]] = 1e4
    assert post.log_density(x) == -math.inf
    with pytest.raises(ValueError):
        post.log_density(np.zeros(post.dim + 1))


# ---------------------------------------------------------------------------
# gradient


def relative_error(g, fd):
    return np.abs(g - fd) / np.maximum(1.0, np.abs(g))


def test_gradient_matches_finite_differences():
    post = Posterior(small_stats(5, seed=0), PriorSpec(), 3)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(scale=0.5, size=post.dim)
        g = post.grad(x)
        fd = central_difference(post.log_density, x, h=1e-5)
        worst = max(worst, float(relative_error(g, fd).max()))
    assert worst < 1e-6


def test_poisson_block_gradient():
    v, t, lam = np.array([3.0, 7.0]), np.array([400.0, 900.0]), np.array([0.01, 0.02])
    s = one_patient(None, v, t)
    post = Posterior(s, PriorSpec(), 0)
    x = np.zeros(post.dim)
    x[post.layout.blocks["log_lambda"]] = np.log(lam)
    phi = np.array([0.4, -0.2])
    z = np.zeros(10)
    z[8:10] = phi
    x[post.layout.blocks["z"]] = z
    g = post.grad(x)[post.layout.blocks["z"]][8:10]
    # with unit omega the prior on z adds -z to the likelihood gradient in phi
    np.testing.assert_allclose(g + phi, v - t * lam * np.exp(phi), rtol=1e-12)


def test_gradient_vanishes_at_grid_stationary_point():
    s = one_patient(None, (4, 9), (500.0, 800.0))
    post = Posterior(s, PriorSpec(), 0)
    x = np.zeros(post.dim)
    idx = post.layout.blocks["log_lambda"]

    def f(a, b):
        y = x.copy()
        y[idx] = (a, b)
        return post.log_density(y)

    centre, half = np.array([-4.0, -4.0]), 3.0
    for _ in range(12):
        grid = np.linspace(-half, half, 41)
        vals = np.array([[f(centre[0] + a, centre[1] + b) for b in grid] for a in grid])
        i, j = np.unravel_index(np.argmax(vals), vals.shape)
        centre = centre + (grid[i], grid[j])
        half *= 0.1
    x[idx] = centre
    assert np.linalg.norm(post.grad(x)[idx]) < 1e-4


def test_functional_api_matches_class():
    s = small_stats(3)
    post = Posterior(s, PriorSpec(), 2)
    x = np.random.default_rng(6).normal(size=post.dim)
    state = UnconstrainedState(x, post.layout)
    assert log_posterior(state, s) == post.log_density(x)
    np.testing.assert_array_equal(grad_log_posterior(state, s), post.grad(x))


# ---------------------------------------------------------------------------
# priors and layout


def test_prior_json_round_trip(tmp_path):
    p = PriorSpec(lambda_rate=20.0, mu_sd=2.0)
    path = tmp_path / "priors.json"
    path.write_text(json.dumps(p.to_json()))
    assert PriorSpec.load(path) == p


@pytest.mark.parametrize("obj", [
    {"lambda": {"family": "lognormal", "mean": 0, "sd": 1}},
    {"weibull": {"family": "weibull"}},
    {"mu": {"family": "normal", "sd": 0}},
    {"mu": {"family": "normal", "scale": 1}},
    {"loadings": {"family": "normal", "mean": 1, "sd": 1}},
])
def test_prior_json_refusals(obj):
    with pytest.raises(ValueError):
        PriorSpec.from_json(obj)


@given(st.integers(0, 6), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_pack_unpack_bijection(n, k, seed):
    layout = Layout(n, k)
    assert layout.dim == 8 + 2 + 10 * k + n * k + 10 + 10 * n
    assert len(layout.names()) == layout.dim
    x = np.random.default_rng(seed).normal(size=layout.dim)
    np.testing.assert_allclose(layout.pack(layout.unpack(x)), x, rtol=1e-14, atol=1e-15)


def test_implied_covariance_is_positive_definite():
    layout = Layout(3, 3)
    p = layout.unpack(np.random.default_rng(0).normal(size=layout.dim))
    cov = p.covariance
    np.testing.assert_allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() > 0
