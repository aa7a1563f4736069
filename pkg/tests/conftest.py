import numpy as np
import pytest

from nurdcorr import numerics as nx
from nurdcorr.frames import PhantomConfig, generate_phantom
from nurdcorr.model import ModelConfig


@pytest.fixture
def rng():
    return nx.make_rng(1234)


@pytest.fixture
def f64():
    with nx.float64_mode():
        yield


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny()


@pytest.fixture
def clean_phantom():
    cfg = PhantomConfig(n_alines=64, n_points=32, speckle_strength=0.0)
    return generate_phantom(cfg, nx.make_rng(0))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
