"""Optional process-pool fan-out with ordered results.

Results are always returned in input order, so outputs do not depend on the
number of workers.  ``LFO_THREADS`` caps the pool; reference mode forces a
plain serial loop.
"""
import os
from concurrent.futures import ProcessPoolExecutor

_reference = False


def set_reference(flag):
    global _reference
    _reference = bool(flag)


def worker_count():
    if _reference:
        return 1
    try:
        return max(1, int(os.environ.get("LFO_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
