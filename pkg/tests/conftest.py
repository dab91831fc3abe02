import pytest

_criteria = []


@pytest.fixture(scope="session")
def criterion_log():
    def record(name: str, ok: bool, detail: str):
        _criteria.append((name, ok, detail))
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _criteria:
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}  {name}: {detail}")
