"""Static computation graphs, parameter layouts and flat parameter vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ConfigError, LayoutError

GROUP_KINDS = ("conv_filter", "fc_row", "bias", "batchnorm")
LEAF_OPS = ("param", "input", "const")


@dataclass(frozen=True)
class ParamGroup:
    name: str
    offset: int
    count: int
    kind: str
    filter_shape: tuple = ()

    def to_json(self) -> dict:
        return {"name": self.name, "offset": self.offset, "count": self.count,
                "kind": self.kind, "filter_shape": list(self.filter_shape)}

    @classmethod
    def from_json(cls, d: dict) -> "ParamGroup":
        return cls(d["name"], int(d["offset"]), int(d["count"]), d["kind"],
                   tuple(int(s) for s in d.get("filter_shape", ())))


@dataclass(frozen=True)
class ParamLayout:
    """Ordered, contiguous partition of a flat parameter vector into named groups."""

    groups: tuple

    def __post_init__(self):
        pos = 0
        for g in self.groups:
            if g.kind not in GROUP_KINDS:
                raise LayoutError(f"group {g.name!r}: unknown kind {g.kind!r}")
            if g.offset != pos or g.count <= 0:
                raise LayoutError(f"group {g.name!r} is not contiguous at offset {pos}")
            if g.kind in ("conv_filter", "fc_row") and g.count != math.prod(g.filter_shape):
                raise LayoutError(f"group {g.name!r}: count {g.count} != prod{g.filter_shape}")
            pos += g.count
        object.__setattr__(self, "_total", pos)

    @property
    def total_count(self) -> int:
        return self._total

    @property
    def offsets(self) -> np.ndarray:
        return np.array([g.offset for g in self.groups], dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        return np.array([g.count for g in self.groups], dtype=np.int64)

    def kinds(self) -> list:
        return [g.kind for g in self.groups]

    def to_json(self) -> dict:
        return {"groups": [g.to_json() for g in self.groups]}

    @classmethod
    def from_json(cls, d: dict) -> "ParamLayout":
        return cls(tuple(ParamGroup.from_json(g) for g in d["groups"]))


@dataclass(frozen=True, eq=False)
class FlatParams:
    """A flat float64 vector tied to a :class:`ParamLayout`.

    Also used for weight-space directions, which share the same structure.
    """

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.layout.total_count:
            raise LayoutError(f"expected {self.layout.total_count} values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def like(self, values) -> "FlatParams":
        return FlatParams(values, self.layout)

    def check_layout(self, other: "FlatParams | ParamLayout", what="vector"):
        layout = other.layout if isinstance(other, FlatParams) else other
        if layout is not self.layout and layout != self.layout:
            raise LayoutError(f"{what} layout does not match")

    def group(self, name: str) -> np.ndarray:
        for g in self.layout.groups:
            if g.name == name:
                return self.values[g.offset:g.offset + g.count]
        raise KeyError(name)


Direction = FlatParams


@dataclass(frozen=True)
class ParamTensor:
    """A parameter tensor as seen by graph nodes: a reshaped slice of the flat vector."""

    name: str
    offset: int
    shape: tuple
    init: str = "he_uniform"
    fan_in: int = 1

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict, hash=False)


@dataclass(frozen=True, eq=False)
class Graph:
    """Topologically ordered operation records with a scalar output node.

    Immutable after construction; safe to share between workers.
    """

    nodes: tuple
    output: int
    layout: ParamLayout
    tensors: tuple
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        needs = []
        for i, n in enumerate(self.nodes):
            if n.id != i or any(j >= i for j in n.inputs):
                raise ConfigError(f"node {i} is out of topological order")
            if n.op == "param":
                needs.append(True)
            else:
                needs.append(any(needs[j] for j in n.inputs))
        if not 0 <= self.output < len(self.nodes):
            raise ConfigError("output node id out of range")
        object.__setattr__(self, "needs_grad", tuple(needs))

    @property
    def num_params(self) -> int:
        return self.layout.total_count


class GraphBuilder:
    """Incrementally records nodes; ``build`` freezes them into a :class:`Graph`."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._groups: list[ParamGroup] = []
        self._tensors: list[ParamTensor] = []
        self._offset = 0

    def _add(self, op, inputs=(), **attrs) -> int:
        nid = len(self._nodes)
        self._nodes.append(Node(nid, op, tuple(inputs), attrs))
        return nid

    def input(self, name: str) -> int:
        return self._add("input", name=name)

    def const(self, value) -> int:
        return self._add("const", value=np.asarray(value, dtype=np.float64))

    def param(self, name: str, shape, kind: str, init: str = "he_uniform", fan_in: int | None = None) -> int:
        """Register a parameter tensor and split it into layout groups.

        ``kind`` is the tensor role: ``dense`` ([out, in], one fc_row group per
        row), ``conv`` ([out, in, kh, kw], one conv_filter group per filter),
        ``bias`` (one group) or ``batchnorm`` (one group).
        """
        shape = tuple(int(s) for s in shape)
        size = math.prod(shape)
        if size <= 0:
            raise ConfigError(f"parameter {name!r} has empty shape {shape}")
        off = self._offset
        if kind in ("dense", "conv"):
            gkind = "fc_row" if kind == "dense" else "conv_filter"
            per = size // shape[0]
            for r in range(shape[0]):
                self._groups.append(ParamGroup(f"{name}[{r}]", off + r * per, per, gkind, shape[1:]))
            fan = per if fan_in is None else fan_in
        elif kind in ("bias", "batchnorm"):
            self._groups.append(ParamGroup(name, off, size, kind, shape))
            fan = 1 if fan_in is None else fan_in
        else:
            raise ConfigError(f"unknown parameter kind {kind!r}")
        self._tensors.append(ParamTensor(name, off, shape, init, fan))
        self._offset += size
        return self._add("param", name=name, offset=off, shape=shape)

    def op(self, kind: str, *inputs: int, **attrs) -> int:
        from .ops import OPS

        if kind not in OPS:
            raise ConfigError(f"unsupported op {kind!r}")
        return self._add(kind, inputs, **attrs)

    def build(self, output: int, spec: dict | None = None) -> Graph:
        return Graph(tuple(self._nodes), output, ParamLayout(tuple(self._groups)),
                     tuple(self._tensors), dict(spec or {}))


def init_params(graph: Graph, seed: int) -> FlatParams:
    """He-style uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)) for weights."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(graph.num_params)
    for t in graph.tensors:
        sl = slice(t.offset, t.offset + t.size)
        if t.init == "he_uniform":
            bound = math.sqrt(6.0 / t.fan_in)
            theta[sl] = rng.uniform(-bound, bound, t.size)
        elif t.init == "ones":
            theta[sl] = 1.0
        elif t.init == "zeros":
            pass
        elif t.init == "normal":
            theta[sl] = rng.standard_normal(t.size)
        else:
            raise ConfigError(f"unknown init {t.init!r}")
    return FlatParams(theta, graph.layout)


def describe(graph: Graph) -> dict[str, Any]:
    counts: dict[str, int] = {}
    for g in graph.layout.groups:
        counts[g.kind] = counts.get(g.kind, 0) + 1
    return {"params": graph.num_params, "nodes": len(graph.nodes), "groups": counts}
