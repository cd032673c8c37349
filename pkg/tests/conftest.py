import pytest


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    lines = []
    request.config._acceptance_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abc"))):
            terminalreporter.write_line(line)
