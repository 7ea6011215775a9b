"""Stochastic Lanczos quadrature: spectral density estimates from random probes."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import LanczosError, LosscapeError, PartialResultError
from ..parallel import WorkerPool, chunk_ranges
from .lanczos import BREAKDOWN_TOL, lanczos, quadrature_rule, ritz_pairs
from .operators import SymOperator

log = logging.getLogger(__name__)

# default probe count and Lanczos steps
DEFAULT_K = 10
DEFAULT_M = 80
DEFAULT_GRID_POINTS = 1000
SIGMA_FRACTION = 0.01
SIGMA_FLOOR = 1e-6
# Support half-margin in units of sigma. 5 keeps the clipped Gaussian tail of
# an extreme node below 3e-7, so the grid integral stays within 1e-3 of 1.
SUPPORT_MARGIN = 5.0


def probe_seed(seed: int, index: int) -> int:
    """Seed of probe ``index``: first 8 bytes of blake2b("{seed}:probe:{index}")."""
    h = hashlib.blake2b(f"{int(seed)}:probe:{int(index)}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def probe_vector(dim: int, seed: int, distribution: str = "gaussian") -> np.ndarray:
    rng = np.random.default_rng(seed)
    if distribution == "gaussian":
        v = rng.standard_normal(dim)
    elif distribution == "rademacher":
        v = rng.choice(np.array([-1.0, 1.0]), size=dim)
    else:
        raise ValueError(f"unknown probe distribution {distribution!r}")
    return v / np.linalg.norm(v)


def gaussian_kernel(nodes, t, sigma):
    """exp(-(t - l)^2 / 2 sigma^2) / (sigma sqrt(2 pi)), broadcast over t (rows) and nodes."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    z = (t - np.asarray(nodes, dtype=np.float64)) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def smoothed_density(eigenvalues, t, sigma):
    """Exact Gaussian-smoothed density of a known spectrum (equal weights 1/N)."""
    ev = np.asarray(eigenvalues, dtype=np.float64)
    return gaussian_kernel(ev, t, sigma).mean(axis=-1)


def l1_distance(f, g, grid) -> float:
    return float(np.trapezoid(np.abs(np.asarray(f) - np.asarray(g)), grid))


@dataclass
class ProbeResult:
    index: int
    seed: int
    nodes: np.ndarray
    weights: np.ndarray
    steps: int

    def to_json(self) -> dict:
        return {"index": self.index, "seed": self.seed, "steps": self.steps,
                "nodes": [float(x) for x in self.nodes], "weights": [float(x) for x in self.weights]}


@dataclass
class SpectrumEstimate:
    probes: list
    sigma: float
    support: tuple
    grid: np.ndarray
    density: np.ndarray
    meta: dict = field(default_factory=dict)

    def all_nodes(self):
        nodes = np.concatenate([p.nodes for p in self.probes])
        weights = np.concatenate([p.weights for p in self.probes]) / len(self.probes)
        return nodes, weights

    def __call__(self, t):
        return density_eval(self, t)

    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def to_json(self) -> dict:
        return {"probes": [p.to_json() for p in self.probes], "sigma": self.sigma,
                "support": [float(self.support[0]), float(self.support[1])],
                "grid": [float(x) for x in self.grid], "density": [float(x) for x in self.density],
                "meta": self.meta}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "SpectrumEstimate":
        probes = [ProbeResult(p.get("index", i), int(p["seed"]), np.array(p["nodes"]),
                              np.array(p["weights"]), p.get("steps", len(p["nodes"])))
                  for i, p in enumerate(d["probes"])]
        return cls(probes, float(d["sigma"]), tuple(d["support"]), np.array(d["grid"]),
                   np.array(d["density"]), dict(d.get("meta", {})))


def density_eval(est: SpectrumEstimate, t):
    """Density at ``t`` (scalar or array): mean over probes of weighted kernel sums."""
    nodes, weights = est.all_nodes()
    vals = gaussian_kernel(nodes, t, est.sigma) @ weights
    return float(vals) if np.ndim(t) == 0 else vals


def run_probe(op: SymOperator, m: int, index: int, seed: int, distribution: str = "gaussian",
              tol: float = BREAKDOWN_TOL) -> ProbeResult:
    v = probe_vector(op.dim, seed, distribution)
    tri, _ = lanczos(op, v, m, tol)
    nodes, weights = quadrature_rule(tri)
    return ProbeResult(index, seed, nodes, weights, tri.actual_steps)


def _probe_chunk(state, rng):
    op, m, seeds, distribution, tol = state
    out = []
    for i in rng:
        try:
            out.append(run_probe(op, m, i, seeds[i], distribution, tol))
        except LosscapeError as exc:
            out.append({"index": i, "seed": seeds[i], "error": f"{type(exc).__name__}: {exc}"})
    return out


def assemble(probes, sigma="auto", grid_points: int = DEFAULT_GRID_POINTS,
             margin: float = SUPPORT_MARGIN, meta: dict | None = None) -> SpectrumEstimate:
    """Average per-probe quadrature rules into a smoothed density on a uniform grid."""
    if not probes:
        raise LanczosError("no successful probes to build a spectrum from")
    lo = min(float(p.nodes.min()) for p in probes)
    hi = max(float(p.nodes.max()) for p in probes)
    if sigma in (None, "auto"):
        sigma = max(SIGMA_FRACTION * (hi - lo), SIGMA_FLOOR)
    sigma = float(sigma)
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    support = (lo - margin * sigma, hi + margin * sigma)
    grid = np.linspace(support[0], support[1], grid_points)
    est = SpectrumEstimate(list(probes), sigma, support, grid, np.empty(0), dict(meta or {}))
    est.density = density_eval(est, grid)
    return est


def iteration_parallel_slq(op: SymOperator, k: int = DEFAULT_K, m: int = DEFAULT_M, sigma="auto",
                           workers: int = 1, seed: int = 0, grid_points: int = DEFAULT_GRID_POINTS,
                           distribution: str = "gaussian", tol: float = BREAKDOWN_TOL) -> SpectrumEstimate:
    """SLQ with the ``k`` probes split into balanced contiguous blocks, one per worker.

    Probe ``i`` always uses :func:`probe_seed` ``(seed, i)`` and results are
    merged in probe order, so the estimate is bit-identical for any worker
    count. Failed probes are recorded in ``meta["failures"]`` and skipped.
    """
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    if m > op.dim:
        warnings.warn(f"m={m} exceeds the dimension {op.dim}; clamping to {op.dim}", stacklevel=2)
        m = op.dim
    seeds = [probe_seed(seed, i) for i in range(k)]
    ranges = chunk_ranges(k, workers)
    with WorkerPool(workers, (op, m, seeds, distribution, tol)) as pool:
        parts = pool.map(_probe_chunk, ranges)
    results = [r for part in parts for r in part]
    probes = [r for r in results if isinstance(r, ProbeResult)]
    failures = [r for r in results if not isinstance(r, ProbeResult)]
    if failures:
        if not probes:
            raise LanczosError(f"all {k} probes failed; first error: {failures[0]['error']}")
        warnings.warn(f"{len(failures)} of {k} probes failed; averaging over {len(probes)}",
                      stacklevel=2)
    # nothing worker-dependent goes into meta, so the JSON matches across worker counts
    meta = {"k": k, "m": m, "seed": seed, "distribution": distribution, "failures": failures}
    return assemble(probes, sigma, grid_points, meta=meta)


def slq_spectrum(op: SymOperator, k: int = DEFAULT_K, m: int = DEFAULT_M, sigma="auto",
                 grid_points: int = DEFAULT_GRID_POINTS, seed: int = 0,
                 distribution: str = "gaussian", workers: int = 1) -> SpectrumEstimate:
    """Eigenvalue density estimate of ``op`` from ``k`` random probes of ``m`` Lanczos steps."""
    return iteration_parallel_slq(op, k, m, sigma, workers, seed, grid_points, distribution)


@dataclass
class RitzDirections:
    vectors: list
    values: np.ndarray
    residuals: np.ndarray
    steps: int


def top_eigenpairs(op: SymOperator, count: int, m: int, seed: int = 0,
                   tol: float = BREAKDOWN_TOL) -> RitzDirections:
    """Ritz pairs for the ``count`` algebraically largest eigenvalues from one Lanczos run.

    Vectors are unit norm with the largest-magnitude entry made positive;
    ``residuals[i]`` is ||A v - lambda v|| measured with one extra product.
    """
    if not 1 <= count <= m:
        raise ValueError(f"need 1 <= count <= m, got count={count}, m={m}")
    if m > op.dim:
        raise ValueError(f"m={m} exceeds the operator dimension {op.dim}")
    v0 = probe_vector(op.dim, probe_seed(seed, 0))
    tri, basis = lanczos(op, v0, m, tol)
    vals, vecs = ritz_pairs(tri, basis)
    take = min(count, len(vals))
    order = np.argsort(vals)[::-1][:take]
    out_vecs, out_vals, res = [], [], []
    for j in order:
        u = vecs[:, j].copy()
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        au = np.asarray(op.apply(u))
        out_vecs.append(u)
        out_vals.append(vals[j])
        res.append(float(np.linalg.norm(au - vals[j] * u)))
    result = RitzDirections(out_vecs, np.array(out_vals), np.array(res), tri.actual_steps)
    if take < count:
        raise PartialResultError(f"Lanczos broke down after {tri.actual_steps} steps; "
                                 f"only {take} of {count} Ritz pairs available", result)
    return result
