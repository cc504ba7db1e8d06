"""Pixel-wise clustering loss: class prototypes, pseudo-labels, gated BCE.

Prototypes are mini-batch k-means centroids of encoder embeddings, one set
per ground-truth class. Every pixel gets the label of its nearest prototype
(positives are listed first, so index < K+ means damaged), and the loss is a
binary cross-entropy restricted to pixels where that label agrees with the
ground truth.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .decoder import bce
from .diffcore import checkpoint


class PrototypeError(ValueError):
    pass


@dataclass
class PrototypeSet:
    positives: np.ndarray  # (K+, D)
    negatives: np.ndarray  # (K-, D)
    built_from: str = ""

    @property
    def K_pos(self) -> int:
        return self.positives.shape[0]

    @property
    def K_neg(self) -> int:
        return self.negatives.shape[0]

    @property
    def D(self) -> int:
        return self.positives.shape[1]

    def stacked(self) -> np.ndarray:
        """Positives first, then negatives."""
        return np.concatenate([self.positives, self.negatives], axis=0)

    def tobytes(self) -> bytes:
        return self.positives.tobytes() + self.negatives.tobytes()


def save_prototypes(path: str | os.PathLike, protos: PrototypeSet) -> None:
    checkpoint.save(path, {"prototypes.positive": protos.positives, "prototypes.negative": protos.negatives})


def load_prototypes(path: str | os.PathLike, built_from: str = "") -> PrototypeSet:
    rec = checkpoint.load(path)
    try:
        return PrototypeSet(rec["prototypes.positive"], rec["prototypes.negative"], built_from)
    except KeyError as exc:
        raise PrototypeError(f"{path}: missing record {exc.args[0]}") from None


# -- mini-batch k-means --------------------------------------------------------------


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(x: np.ndarray, w: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Weighted k-means++ seeding; falls back to unchosen points when all D^2 vanish."""
    chosen = [int(rng.choice(len(x), p=w / w.sum()))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    while len(chosen) < K:
        score = w * d2
        total = score.sum()
        if total > 0:
            nxt = int(rng.choice(len(x), p=score / total))
        else:
            free = np.setdiff1d(np.arange(len(x)), chosen)
            nxt = int(free[rng.integers(len(free))])
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt : nxt + 1])[:, 0])
    return x[chosen].copy()


def minibatch_kmeans(
    x: np.ndarray,
    K: int,
    seed: int,
    weights: np.ndarray | None = None,
    batch_size: int = 1024,
    passes: int = 3,
) -> np.ndarray:
    """Mini-batch k-means over the rows of ``x`` taken in the given order.

    Each batch is assigned to the current centroids, then every centroid
    moves to the running weighted mean of everything it has been assigned so
    far (per-centroid learning rate ``w / n``; counts start at zero, so the
    seed point itself is forgotten on the first update).
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(x) < K:
        raise PrototypeError(f"k-means needs at least K={K} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    first = x[: max(batch_size, K)]
    centroids = _kmeanspp(first, w[: len(first)], K, rng)
    counts = np.zeros(K)
    for _ in range(passes):
        for start in range(0, len(x), batch_size):
            xb, wb = x[start : start + batch_size], w[start : start + batch_size]
            assign = _sq_dists(xb, centroids).argmin(axis=1)
            mass = np.bincount(assign, weights=wb, minlength=K)
            sums = np.zeros_like(centroids)
            np.add.at(sums, assign, xb * wb[:, None])
            hit = mass > 0
            new_counts = counts + mass
            centroids[hit] = (counts[hit, None] * centroids[hit] + sums[hit]) / new_counts[hit, None]
            counts = new_counts
    return centroids


def pixel_stream(token_grids: Iterable[np.ndarray], damage_masks: Iterable[np.ndarray], P: int):
    """Labeled pixel embeddings of tiles, compressed to weighted token rows.

    Every pixel of a patch carries that patch's token, so the pixel stream is
    the token stream with weight = number of pixels of each label in the
    patch. Returns ``(embeddings, labels, weights)`` in tile order, then
    patch order, positives before negatives within a patch.
    """
    emb, lab, wts = [], [], []
    for grid, mask in zip(token_grids, damage_masks):
        gh, gw, D = grid.shape
        pos = mask.reshape(gh, P, gw, P).sum(axis=(1, 3)).reshape(-1).astype(np.float64)
        neg = P * P - pos
        tok = grid.reshape(-1, D)
        emb.append(np.repeat(tok, 2, axis=0))
        lab.append(np.tile([1, 0], len(tok)))
        wts.append(np.stack([pos, neg], axis=1).reshape(-1))
    if not emb:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0)
    e, l, w = np.concatenate(emb), np.concatenate(lab), np.concatenate(wts)
    keep = w > 0
    return e[keep], l[keep], w[keep]


def build_prototypes(
    embeddings: np.ndarray,
    labels: np.ndarray,
    K_pos: int = 32,
    K_neg: int = 32,
    seed: int = 0,
    weights: np.ndarray | None = None,
    batch_size: int = 1024,
    passes: int = 3,
    built_from: str = "",
) -> PrototypeSet:
    """Class-conditional prototypes from a labeled embedding stream."""
    embeddings = np.asarray(embeddings)
    labels = np.asarray(labels)
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)
    seeds = np.random.SeedSequence(seed).generate_state(2)
    out = []
    for cls, K, s in ((1, K_pos, seeds[0]), (0, K_neg, seeds[1])):
        sel = labels == cls
        n = int(sel.sum())
        name = "positive (damaged)" if cls else "negative (intact)"
        if n == 0:
            raise PrototypeError(f"no samples for the {name} class")
        if n < K:
            warnings.warn(f"{name} class has {n} samples; reducing K from {K} to {n}", stacklevel=2)
            K = n
        out.append(minibatch_kmeans(embeddings[sel], K, int(s), w[sel], batch_size, passes))
    dtype = embeddings.dtype if np.issubdtype(embeddings.dtype, np.floating) else np.float64
    return PrototypeSet(out[0].astype(dtype), out[1].astype(dtype), built_from)


# -- pseudo-labels and loss -----------------------------------------------------------


@dataclass
class PseudoLabelMap:
    y_proto: np.ndarray  # uint8, same spatial shape as the ground truth
    reliable: np.ndarray  # bool, y_proto == gt


def nearest_prototype(features: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """Index of the nearest prototype (squared Euclidean, lowest index on ties)."""
    if features.shape[-1] != protos.D:
        raise dc.ShapeError(f"features have D={features.shape[-1]}, prototypes D={protos.D}")
    flat = features.reshape(-1, protos.D)
    return _sq_dists(flat, protos.stacked()).argmin(axis=1).reshape(features.shape[:-1])


def assign_pseudo_labels(feature_map: np.ndarray, protos: PrototypeSet, gt: np.ndarray) -> PseudoLabelMap:
    """Nearest-centroid labels over positives-then-negatives, plus the agreement mask."""
    if feature_map.shape[:-1] != np.shape(gt):
        raise dc.ShapeError(f"feature map {feature_map.shape[:-1]} does not match ground truth {np.shape(gt)}")
    y = (nearest_prototype(feature_map, protos) < protos.K_pos).astype(np.uint8)
    return PseudoLabelMap(y, y == np.asarray(gt))


def pc_loss(probabilities, pseudo: PseudoLabelMap, eps: float = 1e-7) -> dc.Tensor:
    """Mean BCE over reliable pixels; 0 (with no gradient) when none are reliable."""
    probabilities = dc.as_tensor(probabilities)
    if probabilities.shape != pseudo.reliable.shape:
        raise dc.ShapeError(f"pc_loss: probabilities {probabilities.shape} vs mask {pseudo.reliable.shape}")
    if not pseudo.reliable.any():
        return dc.Tensor(np.zeros((), dtype=probabilities.data.dtype))
    p = dc.masked_select(probabilities, pseudo.reliable)
    return dc.mean(bce(p, pseudo.y_proto[pseudo.reliable], eps))
