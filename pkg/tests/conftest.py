import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance outcome, print it, and fail the test when it does not hold."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
        results[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
