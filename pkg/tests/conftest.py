import os
from pathlib import Path

import pytest

ACCEPTANCE_LINES = []
FIXTURES = Path(__file__).parent / "fixtures"


def record(criterion: int, passed: bool, detail: str) -> str:
    line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def sioux_falls_files():
    """``(net, trips)`` paths from ``EQFPN_TNTP_DIR`` or ``data/tntp``; ``None`` if absent."""
    roots = [os.environ.get("EQFPN_TNTP_DIR"), Path(__file__).parents[1] / "data" / "tntp"]
    for root in roots:
        if not root:
            continue
        net, trips = Path(root) / "SiouxFalls_net.tntp", Path(root) / "SiouxFalls_trips.tntp"
        if net.is_file() and trips.is_file():
            return net, trips
    return None


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").split(".")[0])):
            terminalreporter.write_line(line)
