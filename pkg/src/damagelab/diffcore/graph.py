"""Named-parameter graphs and finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import ShapeError, Tensor, backward as _backward

BuildFn = Callable[[Mapping[str, Tensor], Mapping[str, object]], Tensor]


@dataclass(frozen=True)
class NodeRecord:
    index: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]


@dataclass
class Graph:
    """A computation ``build(params, inputs) -> Tensor`` over named parameters.

    The graph itself is immutable: ``forward`` records a fresh tape per call,
    so one graph can be evaluated from several threads.
    """

    build: BuildFn
    params: dict[str, np.ndarray]
    trainable: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.trainable:
            self.trainable = frozenset(self.params)
        unknown = set(self.trainable) - set(self.params)
        if unknown:
            raise KeyError(f"trainable names not in params: {sorted(unknown)}")

    def leaves(self, params: Mapping[str, np.ndarray] | None = None) -> dict[str, Tensor]:
        src = self.params if params is None else params
        return {
            name: Tensor(value, requires_grad=name in self.trainable, name=name)
            for name, value in src.items()
        }


def forward(graph: Graph, inputs: Mapping[str, object], params=None) -> Tensor:
    return graph.build(graph.leaves(params), inputs)


def backward(graph: Graph, inputs: Mapping[str, object], params=None) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate the scalar loss and return ``(loss, grads)`` for trainable params."""
    leaves = graph.leaves(params)
    loss = graph.build(leaves, inputs)
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    _backward(loss)
    grads = {}
    for name in sorted(graph.trainable):
        t = leaves[name]
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return float(loss.data.reshape(-1)[0]), grads


def trace(output: Tensor) -> list[NodeRecord]:
    """Node table of the tape behind ``output``; inputs always precede users."""
    from .tensor import _topo_order

    order = _topo_order(output)
    index = {id(t): i for i, t in enumerate(order)}
    return [
        NodeRecord(i, t.op, tuple(index[id(p)] for p in t._parents), t.shape)
        for i, t in enumerate(order)
    ]


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple[str, tuple[int, ...]] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def check_gradients(
    graph: Graph,
    inputs: Mapping[str, object],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Parameters are promoted to float64. With ``max_entries`` set, a seeded
    random subset of entries per parameter is probed instead of all of them.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in graph.params.items()}
    _, grads = backward(graph, inputs, params)
    rng = np.random.default_rng(seed)
    worst_err, worst, count = 0.0, None, 0
    for name in sorted(graph.trainable):
        value = params[name]
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        for fi in flat_idx:
            idx = np.unravel_index(fi, value.shape)
            orig = value[idx]
            value[idx] = orig + epsilon
            plus = float(forward(graph, inputs, params).data.reshape(-1)[0])
            value[idx] = orig - epsilon
            minus = float(forward(graph, inputs, params).data.reshape(-1)[0])
            value[idx] = orig
            numeric = (plus - minus) / (2 * epsilon)
            err = rel_error(float(grads[name][idx]), numeric)
            count += 1
            if err > worst_err or worst is None:
                worst_err, worst = max(err, worst_err), (name, tuple(int(i) for i in idx))
    return GradCheckReport(worst_err, count, tolerance, worst)
