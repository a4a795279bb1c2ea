import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance-criterion outcome under ``request.node`` name."""

    def record(number, title, passed, detail=""):
        _CRITERIA.setdefault(number, []).append((title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        for title, passed, detail in _CRITERIA[number]:
            tag = "PASS" if passed else "FAIL"
            terminalreporter.write_line(f"[{tag}] criterion {number}: {title} {detail}".rstrip())
