ACCEPTANCE_LINES: dict[int, str] = {}


def record(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"AC{number:02d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
