import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, after the normal summary."""
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(rep.nodeid)
            if not m:
                continue
            num = int(m.group(1))
            ok = outcome == "passed" and rep.when == "call"
            detail = dict(getattr(rep, "user_properties", ())).get("detail", "")
            prev = rows.get(num)
            # a setup error or a failed call overrides a passing phase
            if prev is None or not ok:
                rows[num] = (ok and (prev is None or prev[0]), m.group(2).replace("_", " "), detail or (prev[2] if prev else ""))
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(rows):
        ok, name, detail = rows[num]
        line = f"criterion {num:2d}  {'PASS' if ok else 'FAIL'}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
