"""Deterministic data-parallel execution.

Every bulk operation in this package decomposes its index space into
fixed-size evaluation batches and accumulates per-chunk partial results
in a fixed order.  Both sizes are constants, independent of the worker
count, so workers only decide *who* runs a batch, never *what* a batch
contains.  Results are therefore bitwise identical for any number of
workers.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

CHUNK = 4096
"""Reduction granularity: partial results are produced per CHUNK rows."""

EVAL_BATCH = 16 * CHUNK
"""Rows handed to a worker per dispatch.  A multiple of CHUNK so batch-local
chunking coincides with the global chunk grid."""

T = TypeVar("T")

# pools are cached per worker count: spawning threads per call would
# dominate operations that finish in milliseconds
_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=workers)
            _pools[workers] = pool
        return pool


def resolve_workers(workers: int | None) -> int:
    """Map the user-facing worker knob to a concrete count (0 or None = auto)."""
    if workers is None or workers == 0:
        return os.cpu_count() or 1
    if workers < 0:
        raise ValueError(f"workers must be >= 0, got {workers}")
    return workers


def batch_ranges(n: int, batch: int = EVAL_BATCH) -> list[tuple[int, int]]:
    """Fixed [start, stop) windows covering 0..n, independent of workers."""
    return [(s, min(s + batch, n)) for s in range(0, n, batch)]


def run_batches(
    fn: Callable[[int, int], T],
    n: int,
    workers: int | None = 1,
    batch: int = EVAL_BATCH,
) -> list[T]:
    """Run ``fn(start, stop)`` over every batch window; results in batch order.

    ``fn`` must be pure in the sense that its result depends only on
    (start, stop) and on state that is frozen for the duration of the call.
    """
    ranges = batch_ranges(n, batch)
    w = resolve_workers(workers)
    if w <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]
    return list(_pool(w).map(lambda r: fn(r[0], r[1]), ranges))


def chunk_bounds(start: int, stop: int, chunk: int = CHUNK) -> list[tuple[int, int]]:
    """Chunk windows inside [start, stop), aligned to the global chunk grid."""
    first = (start // chunk) * chunk
    out = []
    for s in range(first, stop, chunk):
        a = max(s, start)
        b = min(s + chunk, stop)
        if a < b:
            out.append((a, b))
    return out


def ordered_total(partials: Sequence[T]) -> T:
    """Left-fold partial results in their fixed order (deterministic)."""
    it = iter(partials)
    total = next(it)
    for p in it:
        total = total + p
    return total
