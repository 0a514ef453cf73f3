"""Collects one pass/fail line per acceptance criterion."""

RESULTS: dict[int, tuple[bool, str, str]] = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[number] = (ok, title, detail)
    print(format_line(number))


def format_line(number: int) -> str:
    ok, title, detail = RESULTS[number]
    return f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"


def summary_lines() -> list[str]:
    return [format_line(n) for n in sorted(RESULTS)]
