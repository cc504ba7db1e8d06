"""Finite-difference checks for every differentiable op, each loss and the full objective.

Everything runs in float64 on small seeded instances. Inputs of kinked ops
(ReLU, hinge, clip) are kept away from their kinks so central differences
are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import dpt as dptm
from .decoder import DecoderParams, decode, focal_loss, init_decoder
from .diffcore import GradCheckReport, Graph, check_gradients
from .encoder import embed_tensor
from .pc import PrototypeSet, PseudoLabelMap, assign_pseudo_labels, pc_loss
from .trainer import TrainConfig, objective, total_loss

OP_TOLERANCE = 1e-4
GRAPH_TOLERANCE = 1e-3
EPSILON = 1e-5


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _away(rng, shape, lo=0.1, hi=1.0):
    """Random values with magnitude in [lo, hi] and random sign."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _weighted(out: dc.Tensor, w: np.ndarray) -> dc.Tensor:
    return dc.sum(dc.mul(out, w))


def _op_graph(fn: Callable, shapes: dict[str, np.ndarray], seed: int) -> tuple[Graph, dict]:
    rng = np.random.default_rng(seed)
    probe = fn({k: dc.Tensor(v) for k, v in shapes.items()})
    w = rng.normal(size=probe.shape)
    return Graph(lambda p, _: _weighted(fn(p), w), shapes), {}


def op_cases(seed: int = 0) -> dict[str, tuple[Callable, dict[str, np.ndarray]]]:
    rng = np.random.default_rng(seed)
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    mask = rng.random((3, 4)) < 0.5
    idx = np.array([0, 2, 2, 1])
    return {
        "add": (lambda p: dc.add(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}),
        "sub": (lambda p: dc.sub(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 1))}),
        "mul": (lambda p: dc.mul(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}),
        "div": (lambda p: dc.div(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": pos(3, 4)}),
        "power": (lambda p: dc.power(p["a"], 2.5), {"a": pos(3, 4)}),
        "relu": (lambda p: dc.relu(p["a"]), {"a": _away(rng, (3, 4))}),
        "sigmoid": (lambda p: dc.sigmoid(p["a"]), {"a": rng.normal(size=(3, 4)) * 3}),
        "log": (lambda p: dc.log(p["a"]), {"a": pos(3, 4)}),
        "sqrt": (lambda p: dc.sqrt(p["a"]), {"a": pos(3, 4)}),
        "clip": (lambda p: dc.clip(p["a"], -0.5, 0.5), {"a": np.concatenate([_away(rng, (6,), 0.55, 1.0), _away(rng, (6,), 0.0, 0.45)])}),
        "hinge": (lambda p: dc.hinge(p["a"]), {"a": _away(rng, (3, 4))}),
        "sum": (lambda p: dc.sum(p["a"], axis=1, keepdims=True), {"a": rng.normal(size=(3, 4))}),
        "mean": (lambda p: dc.mean(p["a"], axis=0), {"a": rng.normal(size=(3, 4))}),
        "matmul": (lambda p: dc.matmul(p["a"], p["b"]), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}),
        "transpose": (lambda p: dc.transpose(p["a"]), {"a": rng.normal(size=(3, 4))}),
        "reshape": (lambda p: dc.reshape(p["a"], (2, 6)), {"a": rng.normal(size=(3, 4))}),
        "conv2d_3x3": (
            lambda p: dc.conv2d(p["x"], p["w"], p["b"]),
            {"x": rng.normal(size=(2, 5, 4, 3)), "w": rng.normal(size=(3, 3, 3, 2)), "b": rng.normal(size=(2,))},
        ),
        "conv2d_1x1": (lambda p: dc.conv2d(p["x"], p["w"]), {"x": rng.normal(size=(1, 3, 3, 2)), "w": rng.normal(size=(1, 1, 2, 3))}),
        "upsample2x": (lambda p: dc.upsample2x(p["x"]), {"x": rng.normal(size=(2, 2, 3, 2))}),
        "grid_avg_pool": (lambda p: dc.grid_avg_pool(p["x"], 2), {"x": rng.normal(size=(2, 4, 6, 3))}),
        "gather": (lambda p: dc.index_select(p["a"], idx), {"a": rng.normal(size=(3, 4))}),
        "masked_select": (lambda p: dc.masked_select(p["a"], mask), {"a": rng.normal(size=(3, 4))}),
        "scatter": (lambda p: dc.scatter(p["v"], mask, mask.shape), {"v": rng.normal(size=(int(mask.sum()),))}),
        "l2_normalize_rows": (lambda p: dc.l2_normalize_rows(p["a"]), {"a": rng.normal(size=(4, 3))}),
    }


def check_ops(seed: int = 0) -> list[SuiteResult]:
    out = []
    for i, (name, (fn, params)) in enumerate(op_cases(seed).items()):
        graph, inputs = _op_graph(fn, params, seed + i)
        out.append(SuiteResult(name, check_gradients(graph, inputs, EPSILON, OP_TOLERANCE)))
    return out


# -- losses ------------------------------------------------------------------------


def _scene(seed: int):
    """A 16x16 tile: 4x4 token grid (P=4), footprint blocks, some damaged."""
    rng = np.random.default_rng(seed)
    H = W = 16
    fp = np.zeros((H, W), dtype=np.uint8)
    dmg = np.zeros((H, W), dtype=np.uint8)
    fp[1:7, 1:7] = 1
    fp[9:15, 2:8] = 1
    fp[2:8, 9:15] = 1
    dmg[9:15, 2:8] = 1
    dmg[2:5, 9:15] = 1
    tokens = rng.normal(size=(1, 4, 4, 8))
    tokens /= np.linalg.norm(tokens, axis=-1, keepdims=True)
    return tokens, fp, dmg


def check_losses(seed: int = 0) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    out = []
    logits = rng.normal(size=(8, 8))
    y = (rng.random((8, 8)) < 0.3).astype(np.uint8)
    g = Graph(lambda p, _: focal_loss(dc.sigmoid(p["z"]), y), {"z": logits})
    out.append(SuiteResult("focal_loss", check_gradients(g, {}, EPSILON, OP_TOLERANCE)))

    feats = rng.normal(size=(8, 8, 3))
    protos = PrototypeSet(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    pseudo = assign_pseudo_labels(feats, protos, y)
    g = Graph(lambda p, _: pc_loss(dc.sigmoid(p["z"]), pseudo), {"z": logits})
    out.append(SuiteResult("pc_loss", check_gradients(g, {}, EPSILON, OP_TOLERANCE)))

    labels = np.array([0, 0, 1, 1, 2, 2, 0, 1, -1])
    centers = dptm.patch_centers(12, 12, 3)
    params = dptm.DptParams(alpha_margin=0.2, grid=3)
    triplets = dptm.sample_triplets(labels, centers, params, seed)
    emb = rng.normal(size=(9, 4)) * 0.3
    # keep every hinge argument clear of the kink
    g = Graph(lambda p, _: dptm.dpt_loss(triplets, p["e"], params.alpha_margin), {"e": emb})
    out.append(SuiteResult("dpt_loss", check_gradients(g, {}, EPSILON, OP_TOLERANCE)))
    return out


def full_objective_graph(seed: int = 0, lambda_pc: float = 0.01, lambda_dpt: float = 0.001, adapter: bool = False):
    """One-tile L_ST graph over decoder params (and optionally adapter A, B)."""
    rng = np.random.default_rng(seed)
    tokens, fp, dmg = _scene(seed)
    spec = DecoderParams(8, (8, 4))
    params = {k: v.astype(np.float64) for k, v in init_decoder(spec, seed).items()}
    params["decoder.head.weight"] = rng.normal(size=params["decoder.head.weight"].shape)
    params["decoder.head.bias"] = rng.normal(size=(1,)) * 0.1
    cfg = TrainConfig(lambda_pc=lambda_pc, lambda_dpt=lambda_dpt, dpt_grid=4, seed=seed)
    protos = PrototypeSet(rng.normal(size=(3, 8)), rng.normal(size=(3, 8)))
    y_tok = (assign_pseudo_labels(tokens[0], protos, np.zeros((4, 4))).y_proto)
    pseudo = y_tok.repeat(4, axis=0).repeat(4, axis=1)[None]
    labels = [dptm.label_patches(fp, dmg, 4, cfg.dpt())[0]]
    patches = rng.normal(size=(16, 48))
    E = rng.normal(size=(48, 8)) / np.sqrt(48)
    if adapter:
        params["adapter.A"] = rng.normal(size=(2, 48)) * 0.1
        params["adapter.B"] = rng.normal(size=(8, 2)) * 0.1

    def build(p, _):
        x = tokens
        if adapter:
            x = dc.reshape(embed_tensor(patches, E, p["adapter.A"], p["adapter.B"]), (1, 4, 4, 8))
        seg, pc, dpt = objective(p, x, dmg[None], cfg, spec, pseudo=pseudo, dpt_labels=labels, tile_ids=["t"], epoch=0)
        return total_loss(seg, pc, dpt, cfg)

    return Graph(build, params)


def check_full_graph(seed: int = 0, max_entries: int | None = 24) -> list[SuiteResult]:
    out = []
    for name, kw in (
        ("L_ST (default weights)", {}),
        ("L_ST (unit aux weights)", {"lambda_pc": 1.0, "lambda_dpt": 1.0}),
        ("L_ST with adapter", {"lambda_pc": 1.0, "lambda_dpt": 1.0, "adapter": True}),
    ):
        g = full_objective_graph(seed, **kw)
        out.append(SuiteResult(name, check_gradients(g, {}, EPSILON, GRAPH_TOLERANCE, max_entries, seed)))
    return out


def run_all(seed: int = 0) -> list[SuiteResult]:
    return check_ops(seed) + check_losses(seed) + check_full_graph(seed)
