import pytest

from pyror.archspec import ArchConfig
from pyror.graph import build_graph


@pytest.fixture(scope="session")
def graph_110_48():
    return build_graph(ArchConfig(110, 48, "pyramid-bn"))


@pytest.fixture
def tiny_graph():
    """Depth-8 graph on 8x8 inputs; small enough for loop-heavy checks."""
    def make(variant="pyramid-bn", alpha=3, num_classes=10, size=8):
        return build_graph(ArchConfig(8, alpha, variant, num_classes=num_classes,
                                      input_shape=(3, size, size)))
    return make


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
