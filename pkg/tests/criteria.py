"""Pass/fail lines for the acceptance criteria, printed at the end of the run."""
import time
from contextlib import contextmanager

RESULTS = {}


@contextmanager
def criterion(number: int, title: str):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        RESULTS[number] = (False, title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
                           time.perf_counter() - t0)
        raise
    detail = ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in info.items())
    RESULTS[number] = (True, title, detail, time.perf_counter() - t0)


def lines() -> list:
    out = []
    for k in sorted(RESULTS):
        ok, title, detail, secs = RESULTS[k]
        out.append(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}] ({secs:.1f}s)")
    return out
