"""Matrix-free symmetric operators and the data-parallel Hessian-vector product."""
from __future__ import annotations

import numpy as np

from ..autodiff import FlatParams, Graph, hvp
from ..autodiff.engine import Batch, _run, _theta
from ..errors import LayoutError, NumericError
from ..parallel import WorkerPool, chunk_ranges, pairwise_sum


def _as_array(v, dim) -> np.ndarray:
    if isinstance(v, FlatParams):
        v = v.values
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (dim,):
        raise LayoutError(f"operator of dimension {dim} applied to shape {v.shape}")
    return v


class SymOperator:
    """A symmetric linear map accessed only through ``apply``."""

    dim: int
    layout = None

    def apply(self, v) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, v):
        return self.apply(v)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ExplicitOperator(SymOperator):
    """Dense symmetric matrix; used for tests and the ``--operator-file`` mode."""

    def __init__(self, matrix, check: bool = True):
        a = np.ascontiguousarray(matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise LayoutError(f"operator matrix must be square, got {a.shape}")
        if check and not np.allclose(a, a.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise LayoutError("operator matrix is not symmetric")
        self.matrix = a
        self.dim = a.shape[0]

    def apply(self, v):
        return self.matrix @ _as_array(v, self.dim)

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)


class DiagonalOperator(SymOperator):
    def __init__(self, diagonal):
        self.diagonal = np.ascontiguousarray(diagonal, dtype=np.float64)
        self.dim = self.diagonal.shape[0]

    def apply(self, v):
        return self.diagonal * _as_array(v, self.dim)

    def eigvalsh(self) -> np.ndarray:
        return np.sort(self.diagonal)

    @property
    def matrix(self):
        return np.diag(self.diagonal)


def _hvp_chunk(state, chunk):
    graph, theta, batches, weights = state
    rng, v = chunk
    out = []
    for i in rng:
        b = batches[i]
        hv = _run(graph, theta, {"x": b.inputs, "y": b.labels}, tangent=v, backward=True)[2]
        out.append(hv * weights[i])
    return out


def batch_weights(batches) -> np.ndarray:
    sizes = np.array([len(b) for b in batches], dtype=np.float64)
    return sizes / sizes.sum()


def data_parallel_hvp(graph: Graph, params, batches, v, workers: int = 1,
                      pool: WorkerPool | None = None) -> np.ndarray:
    """Full-data Hessian-vector product over a fixed batch partition.

    Each worker takes a contiguous block of batches and returns the
    sample-weighted per-batch products; the caller sums them with a fixed
    pairwise tree in batch order, so the result is bit-identical for any
    ``workers``. Workers left without batches contribute nothing.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    theta = _theta(graph, params)
    v = _as_array(v, graph.num_params)
    if not np.all(np.isfinite(v)):
        raise NumericError("direction contains non-finite values")
    owned = pool is None
    if owned:
        pool = WorkerPool(workers, (graph, theta, batches, batch_weights(batches)))
    try:
        ranges = chunk_ranges(len(batches), pool.workers)
        parts = pool.map(_hvp_chunk, [(r, v) for r in ranges])
    finally:
        if owned:
            pool.close()
    return pairwise_sum([hv for part in parts for hv in part])


class HessianOperator(SymOperator):
    """Loss Hessian of ``graph`` at ``params`` averaged over ``batches``.

    With ``workers > 1`` a persistent process pool evaluates the per-batch
    products (data parallelism); call :meth:`close` or use it as a context
    manager to release it.
    """

    def __init__(self, graph: Graph, params, batches, workers: int = 1):
        if isinstance(batches, Batch):
            batches = [batches]
        self.graph = graph
        self.theta = _theta(graph, params).copy()
        self.batches = list(batches)
        if not self.batches:
            raise ValueError("need at least one batch")
        self.weights = batch_weights(self.batches)
        self.workers = workers
        self.dim = graph.num_params
        self.layout = graph.layout
        self.applies = 0
        self._pool = None

    def apply(self, v):
        self.applies += 1
        if len(self.batches) == 1 and self.workers == 1:
            return hvp(self.graph, self.theta, self.batches[0], _as_array(v, self.dim)).values
        if self._pool is None:
            self._pool = WorkerPool(self.workers, (self.graph, self.theta, self.batches, self.weights))
        return data_parallel_hvp(self.graph, self.theta, self.batches, v, pool=self._pool)

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool = None

    def __getstate__(self):
        d = dict(self.__dict__)
        d["_pool"] = None
        return d
