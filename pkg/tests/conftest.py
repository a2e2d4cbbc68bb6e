import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from duality_lab.market import binomial_market, trinomial_market  # noqa: E402

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


@pytest.fixture
def binomial3():
    # complete 3-period instance used across the duality checks
    return binomial_market(3, delta=0.1, lam=1.0)


@pytest.fixture
def trinomial2():
    # incomplete 2-period instance (same parameters as the bundled file)
    return trinomial_market(2, delta=0.08, lam=0.6, q=0.25)


@pytest.fixture
def config_dir():
    return os.path.abspath(CONFIG_DIR)
