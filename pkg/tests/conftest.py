import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line, then assert it."""

    def report(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
