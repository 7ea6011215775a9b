"""Lanczos with full reorthogonalization and a symmetric tridiagonal eigensolver."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import LanczosError, NumericError
from .operators import SymOperator, _as_array

BREAKDOWN_TOL = 1e-10
_EPS = np.finfo(np.float64).eps


@dataclass
class TridiagonalMatrix:
    alpha: np.ndarray
    beta: np.ndarray
    actual_steps: int
    # norm of the residual left after the last step (0 on exact breakdown)
    residual_norm: float = 0.0

    def dense(self) -> np.ndarray:
        return np.diag(self.alpha) + np.diag(self.beta, 1) + np.diag(self.beta, -1)


def tridiag_eigh(alpha, beta, vectors: str = "full", max_iter: int = 60):
    """Eigen-decomposition of a symmetric tridiagonal matrix by implicit QL with Wilkinson shifts.

    ``vectors`` is ``"full"`` (all eigenvectors as columns), ``"first"`` (only
    the first row of the eigenvector matrix, as quadrature needs) or ``"none"``.
    Eigenvalues are returned in ascending order.
    """
    d = [float(x) for x in alpha]
    n = len(d)
    e = [float(x) for x in beta] + [0.0]
    if len(e) != n:
        raise ValueError("beta must have one entry fewer than alpha")
    full = first = None
    if vectors == "full":
        full = np.eye(n)
    elif vectors == "first":
        first = [0.0] * n
        first[0] = 1.0
    elif vectors != "none":
        raise ValueError(f"unknown vectors mode {vectors!r}")

    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= _EPS * dd:
                    break
                m += 1
            if m == l:
                break
            if it == max_iter:
                raise LanczosError(f"tridiagonal QL did not converge for eigenvalue {l}")
            it += 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    # underflow: recover and restart the sweep
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if full is not None:
                    zi1 = full[:, i + 1].copy()
                    full[:, i + 1] = s * full[:, i] + c * zi1
                    full[:, i] = c * full[:, i] - s * zi1
                elif first is not None:
                    zi1 = first[i + 1]
                    first[i + 1] = s * first[i] + c * zi1
                    first[i] = c * first[i] - s * zi1
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0

    d = np.array(d)
    order = np.argsort(d, kind="stable")
    d = d[order]
    if full is not None:
        return d, full[:, order]
    if first is not None:
        return d, np.array(first)[None, order]
    return d, None


def lanczos(op: SymOperator, v0, m: int, tol: float = BREAKDOWN_TOL):
    """Run ``m`` Lanczos steps from ``v0`` with full (twice-applied) reorthogonalization.

    Stops early when a new off-diagonal falls to ``tol * max|alpha|``.
    Returns the tridiagonal matrix and the orthonormal basis as columns
    ``Q`` of shape [N, actual_steps].
    """
    n = op.dim
    v0 = _as_array(v0, n)
    norm = float(np.linalg.norm(v0))
    if not np.isfinite(norm):
        raise NumericError("starting vector is not finite")
    if norm == 0.0:
        raise LanczosError("starting vector is zero")
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > n:
        warnings.warn(f"m={m} exceeds the dimension {n}; clamping to {n}", stacklevel=2)
        m = n
    q = np.empty((m, n))
    q[0] = v0 / norm
    alpha = np.zeros(m)
    beta = np.zeros(max(m - 1, 0))
    resid = 0.0
    steps = m
    for j in range(m):
        w = np.asarray(op.apply(q[j]), dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericError(f"operator returned non-finite values at Lanczos step {j}")
        alpha[j] = q[j] @ w
        w = w - alpha[j] * q[j]
        if j > 0:
            w -= beta[j - 1] * q[j - 1]
        basis = q[:j + 1]
        for _ in range(2):
            w -= basis.T @ (basis @ w)
        b = float(np.linalg.norm(w))
        if j == m - 1:
            resid = b
            break
        if b <= tol * np.abs(alpha[:j + 1]).max():
            steps = j + 1
            resid = b
            break
        beta[j] = b
        q[j + 1] = w / b
    tri = TridiagonalMatrix(alpha[:steps].copy(), beta[:steps - 1].copy(), steps, resid)
    return tri, q[:steps].T


def quadrature_rule(tri: TridiagonalMatrix):
    """Gauss quadrature nodes (Ritz values) and weights (squared first eigenvector entries)."""
    nodes, first = tridiag_eigh(tri.alpha, tri.beta, vectors="first")
    return nodes, first[0] ** 2


def ritz_pairs(tri: TridiagonalMatrix, basis: np.ndarray):
    """All Ritz values (ascending) and unit Ritz vectors as columns."""
    vals, y = tridiag_eigh(tri.alpha, tri.beta, vectors="full")
    vecs = basis @ y
    vecs /= np.linalg.norm(vecs, axis=0, keepdims=True)
    return vals, vecs
