import pytest

_VERDICTS = pytest.StashKey[dict]()


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def __init__(self, store: dict):
        self.store = store

    def record(self, number: int, ok: bool, detail: str) -> bool:
        self.store[number] = (bool(ok), detail)
        return bool(ok)


@pytest.fixture(scope="session")
def verdicts(request) -> Verdicts:
    return Verdicts(request.config.stash.setdefault(_VERDICTS, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, detail = store[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
