"""Minimal reverse-mode differentiation over numpy arrays."""
from . import checkpoint
from .graph import GradCheckReport, Graph, NodeRecord, backward, check_gradients, forward, rel_error, trace
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    checked,
    clip,
    conv2d,
    div,
    grid_avg_pool,
    hinge,
    index_select,
    l2_normalize_rows,
    log,
    masked_select,
    matmul,
    mean,
    mul,
    power,
    relu,
    reshape,
    scatter,
    sigmoid,
    sqrt,
    sub,
    sum,
    transpose,
    upsample2x,
)

__all__ = [
    "GradCheckReport",
    "Graph",
    "NodeRecord",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "check_gradients",
    "checked",
    "checkpoint",
    "clip",
    "conv2d",
    "div",
    "forward",
    "grid_avg_pool",
    "hinge",
    "index_select",
    "l2_normalize_rows",
    "log",
    "masked_select",
    "matmul",
    "mean",
    "mul",
    "power",
    "rel_error",
    "relu",
    "reshape",
    "scatter",
    "sigmoid",
    "sqrt",
    "sub",
    "sum",
    "trace",
    "transpose",
    "upsample2x",
]
