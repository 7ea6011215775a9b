"""Loss surfaces on a 2D plane through the final weights, trajectory projection and
interpolation between minima."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Batch, FlatParams, Graph
from .autodiff.engine import _run, _theta
from .directions import DirectionPair
from .errors import NearParallelError, NumericError
from .modelzoo.data import Dataset, split_batch
from .parallel import WorkerPool, chunk_ranges, pairwise_sum
from .spectral import HessianOperator, SpectrumEstimate, slq_spectrum

log = logging.getLogger(__name__)

# default plane settings
DEFAULT_BORDER = 0.4
DEFAULT_FRACTION = 0.2
DEFAULT_GRID = 50
DEFAULT_POINTS = 20
EVAL_BATCH = 1024


@dataclass
class PathPoint:
    alpha: float
    beta: float
    z: float
    iteration: int
    loss: float = float("nan")
    residual: float = 0.0

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "z": _num(self.z), "iter": self.iteration,
                "loss": _num(self.loss), "residual": self.residual}


def _num(x):
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass
class LandscapeGrid:
    dirs: DirectionPair
    center: FlatParams
    x_range: tuple
    y_range: tuple
    n: int
    z: np.ndarray
    path: list
    stats: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_range[0], self.x_range[1], self.n)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], self.n)

    def to_json(self) -> dict:
        """``z`` is row-major with ``z[i][j]`` at (xs[i], ys[j]); diverged cells are null."""
        return {
            "dirs_meta": self.dirs.describe(),
            "x_range": [float(v) for v in self.x_range],
            "y_range": [float(v) for v in self.y_range],
            "N": self.n,
            "z": [_num(v) for v in self.z.ravel()],
            "path": [p.to_json() for p in self.path],
            "stats": self.stats,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z"])
            xs, ys = self.xs, self.ys
            for i in range(self.n):
                for j in range(self.n):
                    w.writerow([repr(float(xs[i])), repr(float(ys[j])), repr(float(self.z[i, j]))])


def batch_loss(graph: Graph, theta: np.ndarray, pieces) -> float:
    """Sample-weighted mean loss over a fixed list of batches (fixed summation order)."""
    total = sum(len(b) for b in pieces)
    vals = [np.float64(_run(graph, theta, {"x": b.inputs, "y": b.labels})[0] * (len(b) / total))
            for b in pieces]
    return float(pairwise_sum(vals))


def _pieces(data) -> list:
    if isinstance(data, Batch):
        return split_batch(data, EVAL_BATCH)
    if isinstance(data, Dataset):
        return split_batch(data.as_batch(), EVAL_BATCH)
    return list(data)


def project_trajectory(traj, dirs: DirectionPair, center: FlatParams | None = None) -> list:
    """Least-squares (alpha, beta, residual) of theta_i - theta_n in the plane of ``dirs``.

    Uses the 2x2 normal equations; the final snapshot maps to (0, 0).
    """
    snaps = [s.params for s in traj.snapshots] if hasattr(traj, "snapshots") else list(traj)
    center = snaps[-1] if center is None else center
    p1, p2 = dirs.phi1.values, dirs.phi2.values
    for s in snaps:
        s.check_layout(dirs.layout, "trajectory")
    g11, g12, g22 = p1 @ p1, p1 @ p2, p2 @ p2
    det = g11 * g22 - g12 * g12
    if abs(det) < 1e-12 * g11 * g22 or g11 == 0 or g22 == 0:
        raise NearParallelError("plane directions are nearly parallel")
    out = []
    for s in snaps:
        d = s.values - center.values
        r1, r2 = p1 @ d, p2 @ d
        a = (g22 * r1 - g12 * r2) / det
        b = (g11 * r2 - g12 * r1) / det
        res = float(np.linalg.norm(d - a * p1 - b * p2))
        out.append((float(a), float(b), res))
    return out


def grid_ranges(coords, border: float):
    lo, hi = float(min(coords)), float(max(coords))
    span = hi - lo
    if span == 0.0:
        # constant trajectory: fall back to a unit-span window
        span = 1.0
        lo, hi = lo - 0.5, hi + 0.5
    return (lo - border * span, hi + border * span)


def _grid_chunk(state, rng):
    graph, center, p1, p2, xs, ys, pieces = state
    n = len(ys)
    out = np.empty(len(rng))
    bad = 0
    for k, c in enumerate(rng):
        i, j = divmod(c, n)
        theta = center + xs[i] * p1 + ys[j] * p2
        try:
            out[k] = batch_loss(graph, theta, pieces)
        except NumericError:
            out[k] = np.nan
            bad += 1
    return out, len(rng), bad


def evaluate_plane(graph: Graph, center: FlatParams, dirs: DirectionPair, x_range, y_range, n: int,
                   data, workers: int = 1):
    """Loss on an n x n grid; cells are split into contiguous row-major chunks per worker."""
    if n < 2:
        raise ValueError("grid side must be >= 2")
    theta = _theta(graph, center)
    dirs.phi1.check_layout(graph.layout, "direction")
    xs = np.linspace(x_range[0], x_range[1], n)
    ys = np.linspace(y_range[0], y_range[1], n)
    state = (graph, theta, dirs.phi1.values, dirs.phi2.values, xs, ys, _pieces(data))
    with WorkerPool(workers, state) as pool:
        parts = pool.map(_grid_chunk, chunk_ranges(n * n, workers))
    z = np.concatenate([p[0] for p in parts]).reshape(n, n)
    evals = sum(p[1] for p in parts)
    bad = sum(p[2] for p in parts)
    if bad:
        warnings.warn(f"{bad} of {n * n} grid cells diverged and were stored as NaN", stacklevel=2)
    return z, evals, bad


def evaluate_grid(graph: Graph, traj, dirs: DirectionPair, data, n: int = DEFAULT_GRID,
                  border: float = DEFAULT_BORDER, workers: int = 1) -> LandscapeGrid:
    """Project the trajectory, evaluate its path losses, then the loss grid around theta_n.

    ``data`` is the fixed evaluation subset (a Batch, a list of batches or a
    Dataset). Ranges span the projected coordinates widened by
    ``border`` times their span on each side.
    """
    if n < 2:
        raise ValueError("grid side must be >= 2")
    if border < 0:
        raise ValueError("border must be >= 0")
    t0 = time.perf_counter()
    snaps = traj.snapshots
    center = snaps[-1].params
    coords = project_trajectory(traj, dirs, center)
    x_range = grid_ranges([c[0] for c in coords], border)
    y_range = grid_ranges([c[1] for c in coords], border)
    pieces = _pieces(data)
    p1, p2 = dirs.phi1.values, dirs.phi2.values
    path = []
    for (a, b, res), s in zip(coords, snaps):
        try:
            zi = batch_loss(graph, center.values + a * p1 + b * p2, pieces)
        except NumericError:
            zi = float("nan")
        path.append(PathPoint(a, b, zi, s.iteration, s.loss, res))
    t1 = time.perf_counter()
    z, evals, bad = evaluate_plane(graph, center, dirs, x_range, y_range, n, pieces, workers)
    t2 = time.perf_counter()
    stats = {"grid_evaluations": evals, "path_evaluations": len(path), "nan_cells": bad,
             "samples": sum(len(b) for b in pieces)}
    return LandscapeGrid(dirs, center, x_range, y_range, n, z, path, stats,
                         {"overhead_s": t1 - t0, "grid_s": t2 - t1, "workers": workers})


def line_losses(graph: Graph, center: FlatParams, direction: FlatParams, ts, data) -> np.ndarray:
    """Loss at center + t * direction for each t."""
    pieces = _pieces(data)
    c, d = _theta(graph, center), direction.values
    return np.array([batch_loss(graph, c + t * d, pieces) for t in ts])


@dataclass
class InterpolationPoint:
    lam: float
    params: FlatParams
    loss: float
    spectrum: SpectrumEstimate | None = None

    def to_json(self) -> dict:
        d = {"lambda": self.lam, "loss": _num(self.loss)}
        if self.spectrum is not None:
            d["spectrum"] = self.spectrum.to_json()
        return d


@dataclass
class InterpolationResult:
    points: list

    def to_json(self) -> dict:
        return {"points": [p.to_json() for p in self.points]}

    @property
    def losses(self) -> np.ndarray:
        return np.array([p.loss for p in self.points])


def interpolate_minima(graph: Graph, theta_a: FlatParams, theta_b: FlatParams, data,
                       points: int = DEFAULT_POINTS, spectrum: dict | None = None,
                       workers: int = 1) -> InterpolationResult:
    """Loss (and optionally an SLQ spectrum) at ``points`` evenly spaced points of the
    segment (1 - lam) * theta_a + lam * theta_b, endpoints included.

    ``spectrum`` holds keyword arguments for :func:`slq_spectrum` (k, m, sigma,
    seed, ...); the Hessian is taken over ``data``.
    """
    theta_a.check_layout(theta_b, "second minimum")
    theta_a.check_layout(graph.layout, "minimum")
    if points < 2:
        raise ValueError("points must be >= 2")
    pieces = _pieces(data)
    out = []
    for lam in np.linspace(0.0, 1.0, points):
        lam = float(lam)
        theta = FlatParams((1.0 - lam) * theta_a.values + lam * theta_b.values, graph.layout)
        try:
            loss = batch_loss(graph, theta.values, pieces)
        except NumericError:
            loss = float("nan")
        est = None
        if spectrum is not None:
            op = HessianOperator(graph, theta, pieces)
            est = slq_spectrum(op, workers=workers, **spectrum)
        out.append(InterpolationPoint(lam, theta, loss, est))
    return InterpolationResult(out)
