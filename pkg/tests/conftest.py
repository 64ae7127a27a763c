def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            detail = dict(rep.user_properties).get("criterion")
            if detail is not None:
                lines.append((detail, "PASS" if rep.passed else "FAIL"))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for detail, verdict in sorted(lines, key=lambda t: int(t[0].split()[0])):
        terminalreporter.write_line(f"{verdict}  {detail}")
