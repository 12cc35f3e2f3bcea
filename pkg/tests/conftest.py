import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, after the run."""
    mod = sys.modules.get("test_acceptance")
    verdicts = dict(getattr(mod, "VERDICTS", {}))
    for rep in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", []):
        name = rep.nodeid.rsplit("::", 1)[-1]
        if "test_acceptance.py" in rep.nodeid and name.startswith("test_") and name[5:7].isdigit():
            verdicts.setdefault(int(name[5:7]), f"[FAIL] criterion {int(name[5:7]):>2}: {name}: no verdict reached")
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
