import sys
from pathlib import Path

# make the oracle helpers importable as a plain module
sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, text: str) -> None:
    """Remember one acceptance verdict and echo it."""
    _ACCEPTANCE[criterion] = (ok, text)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {text}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, text = _ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {text}")
