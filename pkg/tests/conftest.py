import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from noisycorr.data import SyntheticSpec, build_dataset  # noqa: E402
from noisycorr.trainer import TrainConfig  # noqa: E402

settings.register_profile(
    "repo", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

# lines collected by the acceptance module, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_SPEC = SyntheticSpec(n_classes=4, n_train=96, n_val=32, n_test=32, noise_ratio=0.25, seed=3)
TINY_CONFIG = TrainConfig(
    batch_size=16, n_pseudo_classes=8, d_joint=16, warmup_epochs=2, total_epochs=5, seed=3
)


@pytest.fixture(scope="session")
def tiny_bundle():
    return build_dataset(TINY_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
