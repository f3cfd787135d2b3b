import sys

import numpy as np
import pytest

from mmm.tensor_io import SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_ds():
    spec = SyntheticSpec(n_components=6, D=8, T=40, n_utterances=12, n_layers=3,
                         component_spread=1.0, noise_sigma=0.2)
    return generate_synthetic(spec, seed=5)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
