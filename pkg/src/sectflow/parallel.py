"""Process-pool map with a fixed chunking, so results do not depend on the worker count."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence


def chunks(n: int, size: int) -> list:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, farmed out to ``workers`` processes.

    Output order is the input order.  ``fn`` must be picklable (a module-level
    function or a partial of one) when ``workers > 1``.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
