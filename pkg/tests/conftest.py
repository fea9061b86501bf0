import hypothesis
import numpy as np
import pytest

from critforge.lprm import build_default_layout
from critforge.model import ModelConfig
from critforge.synth import generate_campaign, scaled_campaign

hypothesis.settings.register_profile("ci", deadline=None, max_examples=50)
hypothesis.settings.load_profile("ci")


@pytest.fixture(scope="session")
def layout():
    return build_default_layout(seed=0)


@pytest.fixture(scope="session")
def small_campaign():
    """Four 30-record cycles; enough for split, container and training plumbing."""
    return generate_campaign(scaled_campaign(0.0), seed=3)


@pytest.fixture
def tiny_config():
    return ModelConfig(conv3d=[(3, 2, 4)], conv2d=[(3, 2, 4)], head_width=8, head_layers=2, dropout=0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
