"""Strong-scaling measurements, speedup error propagation and Amdahl-law fits."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BenchError
from .parallel import run_chunked

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class ScalingRun:
    task: str
    worker_counts: list
    repeats: int
    times: list = field(default_factory=list)  # one list of seconds per worker count
    digests: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def means(self) -> np.ndarray:
        return np.array([np.mean(t) for t in self.times])

    @property
    def stds(self) -> np.ndarray:
        return np.array([np.std(t, ddof=1) if len(t) > 1 else 0.0 for t in self.times])

    @property
    def sems(self) -> np.ndarray:
        """Standard error of each mean time."""
        return np.array([s / math.sqrt(len(t)) for s, t in zip(self.stds, self.times)])

    def to_json(self) -> dict:
        return {"task": self.task, "worker_counts": list(self.worker_counts), "repeats": self.repeats,
                "times": self.times, "means": self.means.tolist(), "stds": self.stds.tolist(),
                "sems": self.sems.tolist(),
                "digests": self.digests, "meta": self.meta}


@dataclass
class AmdahlFit:
    f: float
    f_std: float
    residual: float
    weighted: bool = True

    def to_json(self) -> dict:
        std = self.f_std if math.isfinite(self.f_std) else None
        return {"f": self.f, "f_std": std, "residual": self.residual, "weighted": self.weighted}


def result_digest(result) -> str:
    """Stable hash of a task result, used to check outputs agree across worker counts."""
    if isinstance(result, np.ndarray):
        payload = np.ascontiguousarray(result).tobytes()
    elif hasattr(result, "dumps"):
        payload = result.dumps().encode()
    elif isinstance(result, (dict, list)):
        payload = json.dumps(result, sort_keys=True).encode()
    else:
        payload = repr(result).encode()
    return hashlib.sha256(payload).hexdigest()


def measure(task, worker_counts, repeats: int = 3, warmup: bool = True, name: str | None = None,
            clock=time.perf_counter) -> ScalingRun:
    """Time ``task(workers)`` ``repeats`` times per worker count after one discarded warm-up.

    On failure a :class:`BenchError` carries the partial run.
    """
    counts = [int(p) for p in worker_counts]
    if not counts or min(counts) < 1:
        raise ValueError("worker counts must be positive")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    run = ScalingRun(name or getattr(task, "name", type(task).__name__), counts, repeats)
    for p in counts:
        times = []
        try:
            if warmup:
                task(p)
            result = None
            for _ in range(repeats):
                t0 = clock()
                result = task(p)
                times.append(clock() - t0)
        except Exception as exc:
            raise BenchError(f"task {run.task} failed at {p} workers: {exc}", run) from exc
        run.times.append(times)
        run.digests.append(result_digest(result))
    return run


def propagate_speedup(t1: float, s1: float, tp: float, sp: float):
    """S = T1/Tp with sigma_S = sqrt((1/Tp)^2 sigma_T1^2 + (T1/Tp^2)^2 sigma_Tp^2)."""
    s = t1 / tp
    return s, math.sqrt((s1 / tp) ** 2 + (t1 * sp / tp ** 2) ** 2)


def speedup_with_error(run: ScalingRun) -> list:
    """(p, S, sigma_S) rows from the mean times.

    The time uncertainties fed into the propagation are standard errors of
    the means, so sigma_S shrinks as repeats grow.
    """
    if 1 not in run.worker_counts:
        raise ValueError("a single-worker baseline is required")
    means, sems = run.means, run.sems
    base = run.worker_counts.index(1)
    rows = []
    for p, tp, sp in zip(run.worker_counts, means, sems):
        s, sigma = propagate_speedup(means[base], sems[base], tp, sp)
        rows.append((p, float(s), sigma))
    return rows


def amdahl_speedup(f, p):
    return 1.0 / ((1.0 - f) + f / np.asarray(p, dtype=np.float64))


def golden_section(fn, a: float, b: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fn(d)
    cands = [(fn(a), a), (fc, c), (fd, d), (fn(b), b)]
    return min(cands)[1]


def amdahl_fit(points) -> AmdahlFit:
    """Weighted least-squares fit of the parallel fraction f in [0, 1].

    Minimizes sum(((S_model - S) / sigma_S)^2) by a coarse scan followed by
    golden-section search. If any sigma_S is zero the fit is unweighted.
    ``f_std`` comes from the curvature of the objective at the minimum.
    """
    pts = [(float(p), float(s), float(e)) for p, s, e in points]
    if len({p for p, _, _ in pts}) < 2:
        raise ValueError("need at least two distinct worker counts")
    p = np.array([x[0] for x in pts])
    s = np.array([x[1] for x in pts])
    e = np.array([x[2] for x in pts])
    weighted = bool(np.all(e > 0))
    w = 1.0 / e ** 2 if weighted else np.ones_like(s)

    def chi2(f):
        r = amdahl_speedup(f, p) - s
        return float(np.sum(w * r * r))

    scan = np.linspace(0.0, 1.0, 201)
    vals = [chi2(f) for f in scan]
    i = int(np.argmin(vals))
    lo, hi = scan[max(i - 1, 0)], scan[min(i + 1, len(scan) - 1)]
    f = golden_section(chi2, lo, hi)
    best = chi2(f)

    h = 1e-4
    if f - h < 0:
        a, b, c = chi2(f), chi2(f + h), chi2(f + 2 * h)
    elif f + h > 1:
        a, b, c = chi2(f - 2 * h), chi2(f - h), chi2(f)
    else:
        a, b, c = chi2(f - h), chi2(f), chi2(f + h)
    curv = (a - 2 * b + c) / (h * h)
    scale = 1.0 if weighted else best / max(len(pts) - 1, 1)
    f_std = math.sqrt(2.0 * scale / curv) if curv > 0 else float("inf")
    return AmdahlFit(float(f), f_std, best, weighted)


def scaling_table(rows) -> str:
    lines = ["p,S,sigma_S"]
    lines += [f"{p},{s!r},{e!r}" for p, s, e in rows]
    return "\n".join(lines) + "\n"


def _sleep_chunk(state, rng):
    for _ in rng:
        time.sleep(state)
    return len(rng)


class SleepTask:
    """``jobs`` independent sleeps of ``seconds`` each, spread over the workers."""

    name = "sleep"

    def __init__(self, jobs: int = 4, seconds: float = 1.0):
        self.jobs, self.seconds = jobs, seconds

    def __call__(self, workers: int):
        return sum(run_chunked(_sleep_chunk, self.seconds, self.jobs, workers))


class GridTask:
    name = "grid"

    def __init__(self, graph, center, dirs, x_range, y_range, n, data):
        self.args = (graph, center, dirs, x_range, y_range, n, data)

    def __call__(self, workers: int):
        from .landscape import evaluate_plane

        graph, center, dirs, xr, yr, n, data = self.args
        return evaluate_plane(graph, center, dirs, xr, yr, n, data, workers)[0]


class SlqIterationTask:
    """Probes spread over workers (iteration parallelism)."""

    name = "slq-iteration"

    def __init__(self, op, k: int = 8, m: int = 80, seed: int = 0):
        self.op, self.k, self.m, self.seed = op, k, m, seed

    def __call__(self, workers: int):
        from .spectral import iteration_parallel_slq

        return iteration_parallel_slq(self.op, self.k, self.m, workers=workers, seed=self.seed)


class SlqDataTask:
    """Probes run in sequence; every Hessian-vector product is split over workers by batch."""

    name = "slq-data"

    def __init__(self, graph, params, batches, k: int = 8, m: int = 80, seed: int = 0):
        self.graph, self.params, self.batches = graph, params, batches
        self.k, self.m, self.seed = k, m, seed

    def __call__(self, workers: int):
        from .spectral import HessianOperator, iteration_parallel_slq

        with HessianOperator(self.graph, self.params, self.batches, workers) as op:
            return iteration_parallel_slq(op, self.k, self.m, workers=1, seed=self.seed)
