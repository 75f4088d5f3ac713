import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()
N_CRITERIA = 11


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the summary."""
    results = request.config.stash[ACCEPTANCE_KEY]

    def record(number, title, passed, detail=""):
        results[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in results:
            title, ok, detail = results[n]
            tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
        else:
            tr.write_line(f"[SKIP] {n:2d}. not run in this session")
