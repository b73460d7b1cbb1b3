"""Collects one verdict line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"CRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    return ok
