import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cohort():
    """Normalized splits of a small synthetic cohort (t_max 16)."""
    from ctformer import data
    cfg = data.SyntheticConfig(n_patients=160, t_max=16, rng_seed=3, lead_time_hours=6)
    cohort = data.generate_synthetic_cohort(cfg)
    tr, va, te = data.split_cohort(cohort, (0.7, 0.15, 0.15), 0)
    stats = data.fit_normalization(tr)
    return [data.zscore_normalize(x, stats) for x in (tr, va, te)]


@pytest.fixture
def tiny_config():
    from ctformer.model import ModelConfig
    return ModelConfig(n_features=12, t_max=16, d_h=8, backbone_units=8, n_layers=1, n_heads=2)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
