from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnus.data import derive_sufficient_stats
from somnus.factors import align_factors, diagonal_prefit_scree, scree_spectrum
from somnus.sampler import SamplerConfig
from somnus.simulate import ScenarioConfig, generate_scenario


def test_fixed_permutation_and_sign_is_removed_exactly():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(10, 3))
    draws = []
    for _ in range(30):
        perm = rng.permutation(3)
        sign = rng.choice([-1.0, 1.0], 3)
        draws.append(L[:, perm] * sign)
    res = align_factors(np.array(draws))
    np.testing.assert_allclose(res.draws, np.broadcast_to(res.draws[0], res.draws.shape), atol=0)
    np.testing.assert_allclose(res.mean, res.draws[0])


def test_single_factor_sign_follows_largest_loading():
    rng = np.random.default_rng(1)
    v = np.array([0.1, -2.0, 0.3, 0.5, 0.0, 0.2, -0.1, 0.4, 0.3, 0.1])[:, None]
    draws = np.array([v * s + 0.01 * rng.normal(size=v.shape) for s in rng.choice([-1, 1], 40)])
    res = align_factors(draws)
    assert res.mean[1, 0] > 0
    np.testing.assert_allclose(res.mean, -v, atol=0.01)


def test_label_switching_recovers_truth():
    rng = np.random.default_rng(2)
    L = rng.normal(size=(10, 3)) * 1.5
    draws = []
    for _ in range(500):
        noisy = L + 0.1 * rng.normal(size=L.shape)
        draws.append(noisy[:, rng.permutation(3)] * rng.choice([-1.0, 1.0], 3))
    res = align_factors(np.array(draws))
    # compare after matching the truth's own column order and signs
    best = np.inf
    for perm in permutations(range(3)):
        M = res.mean[:, perm]
        sign = np.sign(np.sum(M * L, axis=0))
        best = min(best, np.sqrt(np.mean((M * sign - L) ** 2)))
    assert best < 0.05


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_alignment_preserves_covariance(seed, k):
    L = np.random.default_rng(seed).normal(size=(25, 10, k))
    res = align_factors(L)
    before = np.einsum("sik,sjk->sij", L, L)
    after = np.einsum("sik,sjk->sij", res.draws, res.draws)
    np.testing.assert_allclose(after, before, atol=1e-10)


def test_credible_flags_and_reports():
    rng = np.random.default_rng(3)
    L = np.zeros((10, 1))
    L[0, 0] = 3.0
    draws = L + 0.2 * rng.normal(size=(200, 10, 1))
    res = align_factors(draws)
    assert not res.flagged[0, 0]
    assert res.flagged[1:, 0].mean() > 0.8
    np.testing.assert_array_equal(res.zeroed[res.flagged], 0.0)
    rows = res.to_json()["loadings"]
    assert len(rows) == 10 and rows[0]["effect"] == "gamma_RA"


def test_alignment_needs_factors():
    with pytest.raises(ValueError):
        align_factors(np.zeros((5, 10, 0)))


def test_alignment_accepts_fit(small_fit):
    _, _, draws = small_fit
    res = align_factors(draws)
    assert res.draws.shape == (draws.n_chains * draws.n_samples, 10, 3)


def test_scree_strong_factors():
    _, t = generate_scenario(ScenarioConfig(n_patients=1000, n_epochs=5, rng_seed=1, loading_variance=1.0,
                                            idiosyncratic_variance=0.05))
    scree = scree_spectrum(t.theta)
    # eigen-oracle: the generating covariance has the same dominant structure
    truth = np.sort(np.linalg.eigvalsh(t.loadings @ t.loadings.T + np.diag(t.omega2)))[::-1]
    assert truth[:3].sum() / truth.sum() > 0.6
    assert scree.explained[:3].sum() > 0.6
    assert np.all(np.diff(scree.eigenvalues) <= 0)


def test_scree_isotropic():
    rng = np.random.default_rng(4)
    scree = scree_spectrum(rng.normal(size=(1000, 10)))
    assert scree.eigenvalues[0] / scree.eigenvalues[-1] < 2


def test_scree_zero_variance():
    scree = scree_spectrum(np.ones((20, 10)))
    np.testing.assert_allclose(scree.eigenvalues, 0.0, atol=1e-12)
    np.testing.assert_array_equal(scree.explained, 0.0)


def test_diagonal_prefit_runs_without_factors():
    recs, _ = generate_scenario(ScenarioConfig(n_patients=8, n_epochs=100, rng_seed=2))
    scree, draws = diagonal_prefit_scree(derive_sufficient_stats(recs), None,
                                         SamplerConfig(n_chains=1, n_warmup=60, n_samples=40, rng_seed=1),
                                         return_draws=True)
    assert draws.layout.n_factors == 0
    assert scree.eigenvalues.shape == (10,)
    assert [r["component"] for r in scree.rows()] == list(range(1, 11))
