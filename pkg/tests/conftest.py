import numpy as np
import pytest

from sparsegeo.pipeline.scenes import synth_scene, synthetic_backbone


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    sc = synth_scene(3, 64, 64, n_objects=4)
    return sc, synthetic_backbone(sc, 8, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
