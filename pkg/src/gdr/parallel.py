"""Worker pool for independent runs (GDR_THREADS override).

Results never depend on the worker count: tasks are independent, seeded,
and collected in submission order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("GDR_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ValueError(f"GDR_THREADS must be an integer, got {raw!r}") from exc
        return max(1, n)
    return min(4, os.cpu_count() or 1)


def pmap(fn, items):
    """Order-preserving map over independent tasks."""
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
