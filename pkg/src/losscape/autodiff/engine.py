"""Forward evaluation, reverse-mode gradients and R-operator Hessian-vector products."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LayoutError, NumericError, OracleCapError
from .graph import FlatParams, Graph
from .ops import OPS

DEFAULT_ORACLE_CAP = 2000


@dataclass(frozen=True, eq=False)
class Batch:
    """Inputs [B, ...] and labels [B] (class ids or regression targets)."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim == 0 or x.shape[0] < 1:
            raise ValueError("batch must hold at least one sample")
        if y.shape[0] != x.shape[0]:
            raise ValueError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]

    @staticmethod
    def concat(batches) -> "Batch":
        return Batch(np.concatenate([b.inputs for b in batches]),
                     np.concatenate([b.labels for b in batches]))


def _theta(graph: Graph, params) -> np.ndarray:
    if isinstance(params, FlatParams):
        if params.layout is not graph.layout and params.layout != graph.layout:
            raise LayoutError("parameter layout does not match the model")
        return params.values
    v = np.asarray(params, dtype=np.float64)
    if v.shape != (graph.num_params,):
        raise LayoutError(f"expected {graph.num_params} parameters, got shape {v.shape}")
    return v


def _feeds(batch) -> dict:
    if isinstance(batch, Batch):
        return {"x": batch.inputs, "y": batch.labels}
    return dict(batch)


def _run(graph: Graph, theta, feeds, tangent=None, backward=False):
    # overflow is reported as NumericError by the finiteness checks, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _sweep(graph, theta, feeds, tangent, backward)


def _sweep(graph: Graph, theta, feeds, tangent, backward):
    nodes = graph.nodes
    vals = [None] * len(nodes)
    caches = [None] * len(nodes)
    tans = [None] * len(nodes)
    for n in nodes:
        a = n.attrs
        if n.op == "param":
            size = int(np.prod(a["shape"], dtype=np.int64))
            sl = slice(a["offset"], a["offset"] + size)
            vals[n.id] = theta[sl].reshape(a["shape"])
            if tangent is not None:
                tans[n.id] = tangent[sl].reshape(a["shape"])
            continue
        if n.op == "input":
            try:
                vals[n.id] = feeds[a["name"]]
            except KeyError:
                raise LayoutError(f"missing graph input {a['name']!r}") from None
            continue
        if n.op == "const":
            vals[n.id] = a["value"]
            continue
        op = OPS[n.op]
        ins = [vals[i] for i in n.inputs]
        try:
            out, cache = op.forward(ins, a)
        except (ValueError, IndexError) as exc:
            raise LayoutError(f"node {n.id} ({n.op}): {exc}") from exc
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite value in node {n.id} ({n.op})")
        vals[n.id], caches[n.id] = out, cache
        if tangent is not None and graph.needs_grad[n.id]:
            tans[n.id] = op.jvp(ins, [tans[i] for i in n.inputs], out, cache, a)

    loss = vals[graph.output]
    if np.ndim(loss) != 0:
        raise LayoutError(f"output node has shape {np.shape(loss)}, expected a scalar")
    if not backward:
        return float(loss), None, None

    grads = [None] * len(nodes)
    rgrads = [None] * len(nodes)
    grads[graph.output] = np.asarray(1.0)
    second = tangent is not None
    for n in reversed(nodes):
        g = grads[n.id]
        if g is None or n.op in ("param", "input", "const"):
            continue
        op = OPS[n.op]
        ins = [vals[i] for i in n.inputs]
        need = [graph.needs_grad[i] for i in n.inputs]
        gins = op.vjp(ins, vals[n.id], caches[n.id], g, n.attrs, need)
        if second:
            rins = op.rvjp(ins, [tans[i] for i in n.inputs], vals[n.id], tans[n.id],
                           caches[n.id], g, rgrads[n.id], n.attrs, need)
        for k, i in enumerate(n.inputs):
            if not need[k]:
                continue
            if gins[k] is not None:
                grads[i] = gins[k] if grads[i] is None else grads[i] + gins[k]
            if second and rins[k] is not None:
                rgrads[i] = rins[k] if rgrads[i] is None else rgrads[i] + rins[k]

    flat_g = np.zeros(graph.num_params)
    flat_r = np.zeros(graph.num_params) if second else None
    for n in nodes:
        if n.op != "param":
            continue
        off = n.attrs["offset"]
        if grads[n.id] is not None:
            gv = np.ravel(grads[n.id])
            flat_g[off:off + gv.size] += gv
        if second and rgrads[n.id] is not None:
            rv = np.ravel(rgrads[n.id])
            flat_r[off:off + rv.size] += rv
    return float(loss), flat_g, flat_r


def forward_loss(model: Graph, params, batch) -> float:
    """Mean loss of ``model`` at ``params`` over ``batch``."""
    return _run(model, _theta(model, params), _feeds(batch))[0]


def value_and_gradient(model: Graph, params, batch):
    loss, g, _ = _run(model, _theta(model, params), _feeds(batch), backward=True)
    return loss, FlatParams(g, model.layout)


def gradient(model: Graph, params, batch) -> FlatParams:
    return value_and_gradient(model, params, batch)[1]


def hvp(model: Graph, params, batch, v) -> FlatParams:
    """Exact Hessian-vector product via forward-over-reverse (R-operator).

    One forward sweep carries tangents along ``v``; one reverse sweep carries
    adjoints and their tangents. The Hessian is never formed.
    """
    theta = _theta(model, params)
    if isinstance(v, FlatParams):
        if v.layout is not model.layout and v.layout != model.layout:
            raise LayoutError("direction layout does not match the model")
        v = v.values
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise LayoutError(f"direction has shape {v.shape}, expected {theta.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError("direction contains non-finite values")
    _, _, hv = _run(model, theta, _feeds(batch), tangent=v, backward=True)
    return FlatParams(hv, model.layout)


def dense_hessian_oracle(model: Graph, params, batch, cap: int = DEFAULT_ORACLE_CAP,
                         symmetrize: bool = True) -> np.ndarray:
    """Assemble the full Hessian column by column from ``hvp`` on basis vectors."""
    n = model.num_params
    if n > cap:
        raise OracleCapError(f"model has {n} parameters, above the oracle cap of {cap}")
    theta = _theta(model, params)
    feeds = _feeds(batch)
    h = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        h[:, j] = _run(model, theta, feeds, tangent=e, backward=True)[2]
        e[j] = 0.0
    if symmetrize:
        h = 0.5 * (h + h.T)
    return h
