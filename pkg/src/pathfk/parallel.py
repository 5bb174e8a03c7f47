"""Thread fan-out with order-preserving results.

``PATHFK_THREADS`` caps the worker count.  Every caller combines results in
input order, so outputs do not depend on the number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    raw = os.environ.get("PATHFK_THREADS", "").strip()
    if not raw:
        return min(8, os.cpu_count() or 1)
    n = int(raw)
    if n < 1:
        raise ValueError("PATHFK_THREADS must be a positive integer")
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
