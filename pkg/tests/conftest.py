import re

import pytest


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def record(request):
    """Record one acceptance criterion outcome and fail the test if it did not hold."""
    table = request.config._acceptance

    def _record(key, ok, detail):
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}"
        table[key] = line
        print(line)
        assert ok, line

    return _record


def pytest_terminal_summary(terminalreporter, config):
    table = getattr(config, "_acceptance", {})
    if not table:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(table, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        terminalreporter.write_line(table[key])
