import pytest

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record an acceptance criterion outcome: ``criterion(key, ok, detail)``."""
    def record(key: str, ok: bool, detail: str) -> bool:
        _CRITERIA[key] = (bool(ok), detail)
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
