import pytest

_REPORT: list[tuple[int, bool, str, list[str]]] = []


class CriterionLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def record(self, number: int, passed: bool, summary: str, details=()) -> None:
        _REPORT.append((number, passed, summary, list(details)))
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {summary}")
        for line in details:
            print(f"        {line}")


@pytest.fixture(scope="session")
def criteria() -> CriterionLog:
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, summary, details in sorted(_REPORT, key=lambda r: r[0]):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {summary}")
        for line in details:
            terminalreporter.write_line(f"        {line}")
