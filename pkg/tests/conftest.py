import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fit():
    """A quick fit on a small simulated cohort, shared across modules."""
    from somnus.data import derive_sufficient_stats
    from somnus.sampler import SamplerConfig, sample
    from somnus.simulate import ScenarioConfig, generate_scenario

    cfg = ScenarioConfig(scenario="S1", n_patients=12, n_epochs=150, rng_seed=5)
    records, truth = generate_scenario(cfg)
    draws = sample(derive_sufficient_stats(records), None,
                   SamplerConfig(n_chains=2, n_warmup=150, n_samples=100, rng_seed=2))
    return records, truth, draws


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
