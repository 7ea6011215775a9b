"""Reverse-mode autodiff over small static graphs, with exact Hessian-vector products."""
from .engine import (DEFAULT_ORACLE_CAP, Batch, dense_hessian_oracle, forward_loss, gradient,
                     hvp, value_and_gradient)
from .graph import (Direction, FlatParams, Graph, GraphBuilder, Node, ParamGroup, ParamLayout,
                    ParamTensor, describe, init_params)
from .ops import OPS

__all__ = [
    "Batch", "DEFAULT_ORACLE_CAP", "Direction", "FlatParams", "Graph", "GraphBuilder", "Node",
    "OPS", "ParamGroup", "ParamLayout", "ParamTensor", "dense_hessian_oracle", "describe",
    "forward_loss", "gradient", "hvp", "init_params", "value_and_gradient",
]
