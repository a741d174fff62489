"""Collects one line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def record(name: str, passed: bool, detail: str) -> bool:
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    LINES.append(line)
    print(line)
    return passed


def note(name: str, status: str, detail: str) -> None:
    line = f"{status}  {name}: {detail}"
    LINES.append(line)
    print(line)
