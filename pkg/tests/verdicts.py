"""One line per acceptance criterion, collected during the run."""

LINES: list[str] = []


def record(label: str, passed: bool | None, detail: str) -> str:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"[{status}] {label}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    return line
