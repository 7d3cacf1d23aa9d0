import pytest

RESULTS = {}


@pytest.fixture
def report():
    """Record one acceptance line: ``report(n, passed, detail)``."""
    def _report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        RESULTS[number] = line
        print(line)
        return passed
    return _report


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
