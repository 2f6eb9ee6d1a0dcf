"""Shared pytest plumbing: acceptance-criteria result lines in the summary."""

ACCEPTANCE_RESULTS: list[str] = []


def record(number: int, name: str, passed: bool, detail: str = "") -> str:
    line = (f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'} "
            f"{name}" + (f" -- {detail}" if detail else ""))
    ACCEPTANCE_RESULTS.append(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
