"""Plane directions in weight space and filter-wise normalization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import FlatParams, ParamLayout
from .errors import DegenerateDirectionError, LayoutError, RankDeficiencyError
from .modelzoo.checkpoint import load_checkpoint, save_checkpoint
from .spectral import RitzDirections, SymOperator, top_eigenpairs

PROVENANCES = ("random", "pca", "eigen", "user")
_SCALED_KINDS = ("conv_filter", "fc_row", "bias")


@dataclass
class DirectionPair:
    phi1: FlatParams
    phi2: FlatParams
    provenance: str
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.phi1.check_layout(self.phi2, "direction pair")

    @property
    def layout(self) -> ParamLayout:
        return self.phi1.layout

    def describe(self) -> dict:
        return {"provenance": self.provenance, "normalized": self.normalized, **self.meta}


def random_direction(layout: ParamLayout, seed: int) -> FlatParams:
    """I.i.d. standard normal entries from a seeded generator."""
    return FlatParams(np.random.default_rng(seed).standard_normal(layout.total_count), layout)


def _group_norms(values: np.ndarray, layout: ParamLayout) -> np.ndarray:
    return np.sqrt(np.add.reduceat(values * values, layout.offsets))


def filter_normalize(d: FlatParams, theta: FlatParams, degenerate: str = "raise",
                     skipped: list | None = None) -> FlatParams:
    """Rescale every filter, fc row and bias group of ``d`` to the norm of the same group of ``theta``.

    Batch-norm groups are set to exactly zero. A group where ``d`` vanishes but
    ``theta`` does not raises :class:`DegenerateDirectionError`, unless
    ``degenerate="zero"``: then the group stays zero and its name is appended
    to ``skipped``. That happens for PCA directions of units that never moved.
    """
    if degenerate not in ("raise", "zero"):
        raise ValueError(f"degenerate must be 'raise' or 'zero', got {degenerate!r}")
    theta.check_layout(d, "direction")
    layout = d.layout
    dn = _group_norms(d.values, layout)
    tn = _group_norms(theta.values, layout)
    scale = np.zeros(len(layout.groups))
    for gi, g in enumerate(layout.groups):
        if g.kind not in _SCALED_KINDS:
            continue
        if dn[gi] == 0.0:
            if tn[gi] != 0.0:
                if degenerate == "raise":
                    raise DegenerateDirectionError(g.name)
                if skipped is not None:
                    skipped.append(g.name)
            continue
        scale[gi] = tn[gi] / dn[gi]
    return FlatParams(d.values * np.repeat(scale, layout.counts), layout)


def normalize_pair(pair: DirectionPair, theta: FlatParams, degenerate: str = "raise") -> DirectionPair:
    s1, s2 = [], []
    phi1 = filter_normalize(pair.phi1, theta, degenerate, s1)
    phi2 = filter_normalize(pair.phi2, theta, degenerate, s2)
    meta = dict(pair.meta)
    if s1 or s2:
        meta["zero_groups"] = [s1, s2]
    return DirectionPair(phi1, phi2, pair.provenance, True, meta)


def _fix_sign(u: np.ndarray) -> np.ndarray:
    return -u if u[np.argmax(np.abs(u))] < 0 else u


def pca_directions(traj, centered: bool = False, rank_tol: float = 1e-10) -> DirectionPair:
    """Top two principal directions of the differences theta_i - theta_n.

    Works on the (n-1)x(n-1) Gram matrix of the differences, so no N x N
    covariance is ever formed. Directions are unit norm, ordered by singular
    value, with their largest-magnitude entry positive. ``centered`` subtracts
    the mean difference first.

    ``traj`` is a Trajectory or a sequence of FlatParams.
    """
    snaps = [s.params for s in traj.snapshots] if hasattr(traj, "snapshots") else list(traj)
    if len(snaps) < 3:
        raise RankDeficiencyError(f"PCA needs at least 3 snapshots, got {len(snaps)}")
    layout = snaps[-1].layout
    for s in snaps:
        s.check_layout(layout, "snapshot")
    last = snaps[-1].values
    diffs = np.stack([s.values - last for s in snaps[:-1]], axis=1)  # [N, n-1]
    if centered:
        diffs = diffs - diffs.mean(axis=1, keepdims=True)
    gram = diffs.T @ diffs
    evals, evecs = np.linalg.eigh(gram)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    top = max(evals[0], 0.0)
    if top == 0.0 or evals[1] <= rank_tol * top:
        raise RankDeficiencyError("trajectory differences have rank < 2")
    sv = np.sqrt(evals[:2])
    u = diffs @ evecs[:, :2] / sv
    # one Gram-Schmidt pass to clean the rounding from the Gram route
    u[:, 0] /= np.linalg.norm(u[:, 0])
    u[:, 1] -= (u[:, 0] @ u[:, 1]) * u[:, 0]
    u[:, 1] /= np.linalg.norm(u[:, 1])
    phi1, phi2 = _fix_sign(u[:, 0]), _fix_sign(u[:, 1])
    total = float(np.clip(evals, 0, None).sum())
    meta = {"singular_values": [float(x) for x in sv], "centered": centered,
            "explained_variance": [float(e / total) for e in evals[:2]] if total > 0 else []}
    return DirectionPair(FlatParams(phi1, layout), FlatParams(phi2, layout), "pca", False, meta)


def eigen_directions(op: SymOperator, count: int = 2, m: int = 40, seed: int = 0) -> RitzDirections:
    """Ritz vectors for the ``count`` largest Hessian eigenvalues, wrapped as directions.

    ``op`` is typically a :class:`~losscape.spectral.HessianOperator`, which
    fixes the model, parameters and data batches.
    """
    layout = getattr(op, "layout", None)
    res = top_eigenpairs(op, count, min(m, op.dim), seed)
    if layout is not None:
        res.vectors = [FlatParams(v, layout) for v in res.vectors]
    return res


def eigen_pair(op: SymOperator, m: int = 40, seed: int = 0) -> DirectionPair:
    res = eigen_directions(op, 2, m, seed)
    meta = {"eigenvalues": [float(x) for x in res.values],
            "residuals": [float(x) for x in res.residuals], "lanczos_steps": res.steps}
    return DirectionPair(res.vectors[0], res.vectors[1], "eigen", False, meta)


def random_pair(layout: ParamLayout, seed: int) -> DirectionPair:
    rng = np.random.SeedSequence(seed).spawn(2)
    d1 = FlatParams(np.random.default_rng(rng[0]).standard_normal(layout.total_count), layout)
    d2 = FlatParams(np.random.default_rng(rng[1]).standard_normal(layout.total_count), layout)
    return DirectionPair(d1, d2, "random", False, {"seed": seed})


def save_direction(path, d: FlatParams):
    return save_checkpoint(path, d)


def load_direction(path, layout: ParamLayout | None = None) -> FlatParams:
    d = load_checkpoint(path, layout)
    if not np.all(np.isfinite(d.values)):
        raise LayoutError(f"direction {path} has non-finite entries")
    return d


def user_pair(path1, path2, layout: ParamLayout) -> DirectionPair:
    d1, d2 = load_direction(path1, layout), load_direction(path2, layout)
    return DirectionPair(d1, d2, "user", False, {"files": [str(path1), str(path2)]})
