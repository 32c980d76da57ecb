"""Shared pytest configuration.

Holds the acceptance-verdict registry: tests in test_acceptance.py record
one verdict per numbered criterion, and the terminal-summary hook prints
them as a single PASS/FAIL line each at the end of the run (visible
regardless of output capture).
"""

ACCEPTANCE_VERDICTS: dict[int, tuple[str, bool]] = {}


def record_verdict(number: int, name: str, passed: bool) -> None:
    ACCEPTANCE_VERDICTS[number] = (name, passed)
    print(f"criterion {number:2d} ({name}): {'PASS' if passed else 'FAIL'}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_VERDICTS):
        name, passed = ACCEPTANCE_VERDICTS[number]
        terminalreporter.write_line(
            f"criterion {number:2d} ({name}): {'PASS' if passed else 'FAIL'}"
        )
