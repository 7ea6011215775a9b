"""Worker pool, balanced chunking and order-fixed reductions.

CPU-bound numpy work does not scale under the GIL, so ``workers > 1`` uses a
process pool. Shared read-only state (model, parameters, data) is shipped once
per pool through the initializer; tasks then send only chunk descriptors.
Every reduction happens on the caller in a fixed order, so results do not
depend on the worker count.
"""
from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

_STATE = None


def split_counts(n: int, workers: int) -> list:
    """Balanced sizes, larger chunks first: split_counts(10, 4) == [3, 3, 2, 2]."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    q, r = divmod(n, workers)
    return [q + 1 if i < r else q for i in range(workers)]


def chunk_ranges(n: int, workers: int) -> list:
    out, start = [], 0
    for c in split_counts(n, workers):
        out.append(range(start, start + c))
        start += c
    return out


def pairwise_sum(arrays):
    """Sum a list of arrays with a fixed balanced binary tree over list order."""
    arrays = list(arrays)
    if not arrays:
        raise ValueError("nothing to sum")
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def _init_worker(state):
    global _STATE
    _STATE = state
    # Pin BLAS to one thread so per-element summation order matches the caller.
    threadpool_limits(1)


def _trampoline(fn, chunk):
    return fn(_STATE, chunk)


class WorkerPool:
    """Runs ``fn(state, chunk)`` for a list of chunks and returns results in chunk order.

    With ``workers == 1`` everything runs inline in the calling process.
    """

    def __init__(self, workers: int, state=None):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.state = state
        self._executor = None

    def _ensure(self):
        if self._executor is None and self.workers > 1:
            ctx = mp.get_context("fork")
            self._executor = ProcessPoolExecutor(self.workers, mp_context=ctx,
                                                 initializer=_init_worker, initargs=(self.state,))
        return self._executor

    def map(self, fn, chunks) -> list:
        chunks = list(chunks)
        ex = self._ensure()
        if ex is None:
            with threadpool_limits(1):
                return [fn(self.state, c) for c in chunks]
        futures = [ex.submit(_trampoline, fn, c) for c in chunks]
        return [f.result() for f in futures]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_executor"] = None
        return d


def run_chunked(fn, state, n_items: int, workers: int) -> list:
    """One-shot: split ``range(n_items)`` into balanced contiguous chunks, one per worker."""
    ranges = chunk_ranges(n_items, workers)
    with WorkerPool(workers, state) as pool:
        return pool.map(fn, ranges)


def concat_results(parts) -> np.ndarray:
    parts = [np.asarray(p) for p in parts if len(p)]
    return np.concatenate(parts) if parts else np.empty(0)
