"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
import time
from contextlib import contextmanager

LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Record PASS/FAIL for the enclosed checks; ``notes`` entries are appended to the line."""
    notes: list[str] = []
    t0 = time.perf_counter()
    ok = False
    try:
        yield notes
        ok = True
    except AssertionError as exc:
        notes.append(f"failed: {str(exc).splitlines()[0] if str(exc) else 'assertion'}")
        raise
    finally:
        elapsed = time.perf_counter() - t0
        tail = f" (budget {budget_s:g} s)" if budget_s else ""
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} [{elapsed:.1f} s{tail}]"
        if notes:
            line += " " + "; ".join(notes)
        LINES.append(line)
        print(line)
