import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hiernav.netgraph import RoadNetwork  # noqa: E402


@pytest.fixture
def triangle():
    # nodes A=0, B=1, C=2; lengths chosen so free-flow times are 10, 10, 25 at 1 m/s
    return RoadNetwork.build(
        [(0, 0, 0), (1, 10, 0), (2, 20, 0)],
        [(0, 0, 1, 10.0, 1.0), (1, 1, 2, 10.0, 1.0), (2, 0, 2, 25.0, 1.0)],
    )


@pytest.fixture
def diamond():
    return RoadNetwork.build(
        [(0, 0, 0), (1, 1, 1), (2, 1, -1), (3, 2, 0)],
        [(0, 0, 1, 10.0, 1.0), (1, 1, 3, 10.0, 1.0), (2, 0, 2, 12.0, 1.0), (3, 2, 3, 12.0, 1.0)],
    )


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
