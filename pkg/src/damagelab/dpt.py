"""Distance-penalized triplet loss over a coarse patch grid of decoder features.

A tile is cut into a ``g x g`` grid. Each patch gets a pooled decoder
embedding and a label from its building coverage and damage ratios:

    2   background  (r_b < tau_b)
    1   damaged     (r_d >= tau_d)
    0   intact      (r_d <= tau_u)
   -1   ambiguous   (otherwise)

Anchors are confident building patches (0 or 1). The hinge margin is
inflated by a penalty built from normalized patch-centre distances.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class DptParams:
    tau_b: float = 0.02
    tau_u: float = 0.02
    tau_d: float = 0.10
    alpha_margin: float = 0.2
    max_triplets_per_tile: int = 16
    grid: int = 4

    def __post_init__(self):
        if not 0.0 <= self.tau_u <= self.tau_d <= 1.0:
            raise ValueError(f"need 0 <= tau_u <= tau_d <= 1, got tau_u={self.tau_u}, tau_d={self.tau_d}")
        if self.alpha_margin < 0:
            raise ValueError(f"alpha_margin must be >= 0, got {self.alpha_margin}")
        if self.max_triplets_per_tile < 0 or self.grid < 1:
            raise ValueError("max_triplets_per_tile must be >= 0 and grid >= 1")


@dataclass
class PatchLabelGrid:
    g: int
    embeddings: dc.Tensor | np.ndarray  # (g*g, D')
    labels: np.ndarray  # (g*g,) int
    centers: np.ndarray  # (g*g, 2) pixel coordinates (row, col)
    ratios: np.ndarray  # (g*g, 2): r_b, r_d (NaN where there are no building pixels)


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    penalty: float


def patch_centers(H: int, W: int, g: int) -> np.ndarray:
    bh, bw = H / g, W / g
    rows, cols = np.meshgrid((np.arange(g) + 0.5) * bh, (np.arange(g) + 0.5) * bw, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def pool_patches(decoder_features, g: int):
    """Block means of an ``(H, W, D')`` map; returns ``(g*g, D')`` embeddings and centres."""
    x = dc.as_tensor(decoder_features)
    if x.ndim != 3:
        raise dc.ShapeError(f"pool_patches: expected (H, W, D'), got {x.shape}")
    H, W, D = x.shape
    if H % g or W % g:
        raise dc.ShapeError(f"pool_patches: grid {g} does not divide {H}x{W}")
    pooled = dc.grid_avg_pool(dc.reshape(x, (1, H, W, D)), g)
    return dc.reshape(pooled, (g * g, D)), patch_centers(H, W, g)


def patch_ratios(footprint_mask: np.ndarray, damage_mask: np.ndarray, g: int) -> np.ndarray:
    H, W = footprint_mask.shape
    if H % g or W % g:
        raise ValueError(f"grid {g} does not divide {H}x{W}")
    bh, bw = H // g, W // g
    fp = np.asarray(footprint_mask, dtype=bool)
    dm = np.asarray(damage_mask, dtype=bool) & fp
    build = fp.reshape(g, bh, g, bw).sum(axis=(1, 3)).ravel()
    dmg = dm.reshape(g, bh, g, bw).sum(axis=(1, 3)).ravel()
    r_b = build / float(bh * bw)
    with np.errstate(invalid="ignore", divide="ignore"):
        r_d = np.where(build > 0, dmg / np.maximum(build, 1), np.nan)
    return np.stack([r_b, r_d], axis=1)


def labels_from_ratios(ratios: np.ndarray, params: DptParams = DptParams()) -> np.ndarray:
    r_b, r_d = ratios[:, 0], ratios[:, 1]
    defined = ~np.isnan(r_d)
    labels = np.full(len(ratios), -1, dtype=np.int64)
    labels[defined & (r_d <= params.tau_u)] = 0
    labels[defined & (r_d >= params.tau_d)] = 1
    labels[r_b < params.tau_b] = 2
    return labels


def label_patches(footprint_mask, damage_mask, g: int, params: DptParams = DptParams()):
    """Per-patch labels and ``(r_b, r_d)`` ratios."""
    ratios = patch_ratios(footprint_mask, damage_mask, g)
    return labels_from_ratios(ratios, params), ratios


def build_grid(decoder_features, footprint_mask, damage_mask, params: DptParams = DptParams()) -> PatchLabelGrid:
    emb, centers = pool_patches(decoder_features, params.grid)
    labels, ratios = label_patches(footprint_mask, damage_mask, params.grid, params)
    return PatchLabelGrid(params.grid, emb, labels, centers, ratios)


def max_center_distance(centers: np.ndarray) -> float:
    d = centers[:, None, :] - centers[None, :, :]
    return float(np.sqrt((d * d).sum(-1)).max()) if len(centers) else 0.0


def spatial_penalty(a, p, n, tile_norm: float) -> float:
    """``(q_ap + q_an - q_pn) / sqrt(2)`` with ``q`` the distance over ``tile_norm``."""
    if tile_norm <= 0:
        return 0.0
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    q_ap = np.linalg.norm(a - p) / tile_norm
    q_an = np.linalg.norm(a - n) / tile_norm
    q_pn = np.linalg.norm(p - n) / tile_norm
    return float((q_ap + q_an - q_pn) / SQRT2)


def triplet_seed(seed: int, tile_id: str, epoch: int = 0) -> int:
    """Independent per-tile sampling seed derived from (seed, tile_id, epoch)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(tile_id.encode()), epoch])
    return int(ss.generate_state(1)[0])


def sample_triplets(labels: np.ndarray, centers: np.ndarray, params: DptParams, seed: int) -> list[Triplet]:
    """One uniform positive and one uniform negative per shuffled anchor."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    anchors = np.flatnonzero((labels == 0) | (labels == 1))
    anchors = anchors[rng.permutation(len(anchors))]
    norm = max_center_distance(centers)
    out: list[Triplet] = []
    valid_neg = labels >= 0
    for a in anchors:
        if len(out) >= params.max_triplets_per_tile:
            break
        ya = labels[a]
        pos = np.flatnonzero(labels == ya)
        pos = pos[pos != a]
        neg = np.flatnonzero(valid_neg & (labels != ya))
        if len(pos) == 0 or len(neg) == 0:
            continue
        p = int(pos[rng.integers(len(pos))])
        n = int(neg[rng.integers(len(neg))])
        out.append(Triplet(int(a), p, n, spatial_penalty(centers[a], centers[p], centers[n], norm)))
    return out


def dpt_loss(triplets: list[Triplet], embeddings, alpha_margin: float = 0.2) -> dc.Tensor:
    """Mean hinge ``max(0, d_ap^2 - d_an^2 + P_apn + alpha)``; 0 for no triplets."""
    emb = dc.as_tensor(embeddings)
    if not triplets:
        return dc.Tensor(np.zeros((), dtype=emb.data.dtype))
    weights = np.full(len(triplets), 1.0 / len(triplets))
    return weighted_hinge(emb, triplets, weights, alpha_margin)


def weighted_hinge(emb: dc.Tensor, triplets: list[Triplet], weights: np.ndarray, alpha_margin: float) -> dc.Tensor:
    """``sum_t w_t * hinge_t``; rows index into ``emb`` (shared by batched tiles)."""
    a = np.array([t.anchor for t in triplets])
    p = np.array([t.positive for t in triplets])
    n = np.array([t.negative for t in triplets])
    pen = np.array([t.penalty for t in triplets], dtype=emb.data.dtype)
    ea, ep, en = dc.index_select(emb, a), dc.index_select(emb, p), dc.index_select(emb, n)
    d_ap = dc.sub(ea, ep)
    d_an = dc.sub(ea, en)
    arg = dc.sub(dc.sum(dc.mul(d_ap, d_ap), axis=1), dc.sum(dc.mul(d_an, d_an), axis=1))
    arg = dc.add(arg, pen + alpha_margin)
    return dc.sum(dc.mul(dc.hinge(arg), weights.astype(emb.data.dtype)))
