"""Internal thread-pool helpers.

``AFFIELD_THREADS`` caps how many worker threads loss computations may
use. Results are always reduced in a fixed order, so outputs are
bit-identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_ENV_VAR = "AFFIELD_THREADS"


def thread_count() -> int:
    raw = os.environ.get(_ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{_ENV_VAR} must be an integer, got {raw!r}") from None
    return max(1, n)


def ordered_map(fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
    """Apply ``fn`` to every item, preserving input order in the result.

    Runs sequentially unless AFFIELD_THREADS > 1 and there is more than
    one item; either way the returned list is ordered like ``items``.
    """
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
