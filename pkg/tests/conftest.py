from __future__ import annotations

ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(number: int, passed: bool, title: str, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"{'PASS' if passed else 'FAIL'} criterion {number:2d} {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
