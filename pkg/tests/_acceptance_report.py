"""Shared sink for acceptance pass/fail lines, printed in the terminal
summary by conftest.py."""

lines: list[str] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    lines.append(f"{name}: {status}{suffix}")
