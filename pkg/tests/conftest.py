import pytest

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request, capsys):
    """record(n, ok, detail): one pass/fail line per acceptance criterion."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[VERDICTS][n] = line
        with capsys.disabled():
            print(f"\n    {line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[VERDICTS]
    if verdicts:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
