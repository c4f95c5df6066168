"""Collects one verdict line per acceptance criterion for the terminal summary."""

_results: dict[str, str] = {}


def record(crit: str, passed: bool, detail: str) -> bool:
    line = f"{crit} {'PASS' if passed else 'FAIL'}: {detail}"
    _results[crit] = line
    print(line)
    return passed


def lines() -> list[str]:
    key = lambda c: int(c[1:]) if c[1:].isdigit() else 99     # noqa: E731
    return [_results[c] for c in sorted(_results, key=key)]
