"""Shared hooks: the acceptance suite records one verdict per criterion and the
terminal summary prints them as PASS/FAIL lines."""

from collections import defaultdict

ACCEPTANCE = defaultdict(list)     # criterion -> [(label, ok, detail)]
TITLES = {}


def record(criterion: int, title: str, label: str, ok: bool, detail: str = "") -> bool:
    TITLES[criterion] = title
    ACCEPTANCE[criterion].append((label, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[c]
        verdict = "PASS" if all(ok for _, ok, _ in checks) else "FAIL"
        detail = "; ".join(f"{label}: {d}" if d else label for label, _, d in checks)
        tr.write_line(f"criterion {c:2d} {verdict}  {TITLES[c]}  [{detail}]")
