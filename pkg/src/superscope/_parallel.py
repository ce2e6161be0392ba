"""Order-preserving thread pool map.

The worker count comes from the ``threads`` argument, else the
SUPERSCOPE_THREADS environment variable, else 1.  Results are returned in
input order, so aggregation is independent of the thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("SUPERSCOPE_THREADS", "1") or 1)
    return max(1, int(threads))


def parallel_map(fn, items, threads: int | None = None) -> list:
    items = list(items)
    n = thread_count(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
