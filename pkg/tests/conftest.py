import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the end-of-run summary."""
    results = request.config.stash[_RESULTS]

    def record(number: int, passed: bool, detail: str = "") -> bool:
        results[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
