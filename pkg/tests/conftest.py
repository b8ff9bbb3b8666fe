import logging

import numpy as np
import pytest

from cone import synthetic
from cone.ndgrad import Tensor


def tiny_images(n=2, size=12, seed=0):
    return [Tensor(dark) for dark, _ in synthetic.make_pairs(n, size, seed)]


@pytest.fixture
def images():
    return tiny_images()


@pytest.fixture
def synth_root(tmp_path):
    """Five 24x24 pairs on disk in the train/test layout."""
    return synthetic.write_dataset(tmp_path / "data", n=3, size=24, seed=1)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
