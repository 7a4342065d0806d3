import sys

import pytest

from gnas.arch import NetworkShape
from gnas.data import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_data():
    """Four attributes in two planted groups, small enough for exhaustive checks."""
    return generate_synthetic(SyntheticSpec(attrs_per_group=(2, 2), input_dim=8,
                                            latent_dim_per_group=2, label_noise=0.05,
                                            samples=(400, 300, 200), rng_seed=3))


@pytest.fixture(scope="session")
def six_attr_data():
    return generate_synthetic(SyntheticSpec(attrs_per_group=(3, 3), input_dim=8,
                                            latent_dim_per_group=2, label_noise=0.05,
                                            samples=(400, 300, 200), rng_seed=5))


@pytest.fixture
def shape124():
    return NetworkShape((1, 2, 4), (8, 4, 4), head_width=4)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
