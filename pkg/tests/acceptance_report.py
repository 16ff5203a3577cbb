"""Collects one verdict per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)


def lines(total: int = 10) -> list[str]:
    out = []
    for n in range(1, total + 1):
        if n in RESULTS:
            ok, detail = RESULTS[n]
            out.append(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            out.append(f"CRITERION {n:2d}: FAIL  not run, or errored before reporting")
    return out
