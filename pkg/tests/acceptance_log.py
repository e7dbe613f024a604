"""Collects one verdict line per acceptance criterion for the terminal summary."""

from contextlib import contextmanager
import time

RESULTS = {}


@contextmanager
def criterion(number: int, title: str):
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException:
        RESULTS.setdefault(number, []).append((title, False, detail, time.perf_counter() - start))
        raise
    RESULTS.setdefault(number, []).append((title, True, detail, time.perf_counter() - start))


def lines():
    out = []
    for number in sorted(RESULTS):
        parts = RESULTS[number]
        ok = all(p[1] for p in parts)
        title = parts[0][0]
        detail = "; ".join(", ".join(f"{k}={v}" for k, v in p[2].items()) for p in parts if p[2])
        secs = sum(p[3] for p in parts)
        out.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  [{secs:.1f}s]  {detail}")
    return out
