import sys
from fractions import Fraction
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from openevt.interval_maps import IntervalSet, OpenSystem, doubling_map  # noqa: E402
from openevt.ulam import build_partition, spectral_solution  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo runs")


@pytest.fixture(scope="session")
def golden():
    """Doubling map with hole [0, 1/4)."""
    return OpenSystem(doubling_map(), IntervalSet.of((0.0, 0.25)))


@pytest.fixture(scope="session")
def golden_part(golden):
    return build_partition(golden, 4096, markov_mode=True)


@pytest.fixture(scope="session")
def golden_sol(golden, golden_part):
    return spectral_solution(golden, golden_part)


@pytest.fixture(scope="session")
def golden_small(golden):
    part = build_partition(golden, 4, markov_mode=True)
    return part, spectral_solution(golden, part)


@pytest.fixture
def third():
    return Fraction(1, 3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
