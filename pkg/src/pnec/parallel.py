"""Order-preserving thread map with a fixed work decomposition.

Work is always split into the same units regardless of the thread count,
and results are reduced by the caller in unit order, so outputs are
bit-identical for any ``PNEC_NUM_THREADS``. The numba kernels and numpy's
batched linear algebra release the GIL, which is where the time goes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "PNEC_NUM_THREADS"


def num_threads() -> int:
    raw = os.environ.get(ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def unit_slices(n: int, unit: int) -> list[slice]:
    return [slice(lo, min(lo + unit, n)) for lo in range(0, n, unit)]


def pmap(fn, items, threads: int | None = None) -> list:
    """``[fn(x) for x in items]``, evaluated on up to ``threads`` threads."""
    items = list(items)
    threads = num_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items))
