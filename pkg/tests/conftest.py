import numpy as np
import pytest

from nodseg.datapipe import SynthConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long training acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full training runs, skipped unless --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_synth():
    return SynthConfig(size=32, radius_min=5.0, radius_max=9.0, n_train=6, n_test=3, seed=7)


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("NODSEG_OUTPUT_ROOT", str(root))
    return root
