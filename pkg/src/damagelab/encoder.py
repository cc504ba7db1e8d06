"""Frozen patch-token encoder.

Stands in for a pretrained ViT backbone: an image is cut into non-overlapping
``P x P`` patches, each flattened patch is multiplied by a fixed seeded
projection ``E`` of shape ``(P*P*C, D)``, and token rows are L2-normalized.
An optional low-rank adapter adds ``scale * (B @ A).T`` to ``E``; with
``B == 0`` it is an exact identity.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import checkpoint

NORM_EPS = 1e-12
# per-channel pixel standardization applied before patchify, as in ViT preprocessing
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PatchGeometry:
    H: int = 128
    W: int = 128
    C: int = 3
    P: int = 16

    def __post_init__(self):
        if self.P <= 0 or self.H % self.P:
            raise ValueError(f"P must divide H (H={self.H}, P={self.P})")
        if self.W % self.P:
            raise ValueError(f"P must divide W (W={self.W}, P={self.P})")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.P, self.W // self.P

    @property
    def N(self) -> int:
        return (self.H * self.W) // (self.P * self.P)

    @property
    def patch_dim(self) -> int:
        return self.P * self.P * self.C


@dataclass
class ProjectionWeights:
    E: np.ndarray
    seed: int
    frozen: bool = True

    @property
    def D(self) -> int:
        return self.E.shape[1]

    @classmethod
    def init(cls, geometry: PatchGeometry, D: int, seed: int) -> "ProjectionWeights":
        rng = np.random.default_rng(seed)
        E = rng.normal(0.0, 1.0 / np.sqrt(geometry.patch_dim), size=(geometry.patch_dim, D))
        return cls(E.astype(np.float32), seed)


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, P*P*C)
    B: np.ndarray  # (D, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size

    @classmethod
    def init(cls, patch_dim: int, D: int, rank: int, seed: int, scale: float = 1.0, dtype=np.float32):
        if rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {rank}")
        rng = np.random.default_rng(seed)
        A = rng.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(rank, patch_dim)).astype(dtype)
        return cls(A, np.zeros((D, rank), dtype=dtype), scale)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A).T


def standardize(image: np.ndarray) -> np.ndarray:
    """Subtract the channel mean and divide by the channel std (RGB statistics; other C are left as is)."""
    c = image.shape[-1]
    mean = np.zeros(c)
    std = np.ones(c)
    k = min(c, 3)
    mean[:k], std[:k] = PIXEL_MEAN[:k], PIXEL_STD[:k]
    return (image - mean) / std


def patchify(image: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    """``(H, W, C)`` image to ``(N, P*P*C)``; patches row-major over the grid."""
    g = geometry
    if image.shape[0] % g.P:
        raise ValueError(f"P must divide H (H={image.shape[0]}, P={g.P})")
    if image.shape[1] % g.P:
        raise ValueError(f"P must divide W (W={image.shape[1]}, P={g.P})")
    if image.shape != (g.H, g.W, g.C):
        raise ValueError(f"image shape {image.shape} does not match geometry {(g.H, g.W, g.C)}")
    gh, gw = g.grid
    x = image.reshape(gh, g.P, gw, g.P, g.C).transpose(0, 2, 1, 3, 4)
    return x.reshape(g.N, g.patch_dim)


def embed(patches: np.ndarray, weights: ProjectionWeights, adapter: LoraAdapter | None = None) -> np.ndarray:
    """Project patches to tokens and L2-normalize rows (numpy path, no tape)."""
    if patches.shape[-1] != weights.E.shape[0]:
        raise ValueError(f"patch length {patches.shape[-1]} does not match projection rows {weights.E.shape[0]}")
    proj = weights.E if adapter is None else weights.E + adapter.delta().astype(weights.E.dtype)
    t = np.asarray(patches, dtype=proj.dtype) @ proj
    return t / np.sqrt((t * t).sum(axis=-1, keepdims=True) + NORM_EPS)


def embed_tensor(patches, E, A=None, B=None, scale: float = 1.0) -> dc.Tensor:
    """Differentiable ``embed`` used when adapter parameters are trained."""
    proj = dc.as_tensor(E)
    if A is not None:
        proj = dc.add(proj, dc.mul(dc.transpose(dc.matmul(B, A)), scale))
    return dc.l2_normalize_rows(dc.matmul(patches, proj), NORM_EPS)


def tokens_to_pixels(tokens: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    """``(N, D)`` tokens to an ``(H, W, D)`` map; each pixel copies its patch token."""
    g = geometry
    if tokens.shape[0] != g.N:
        raise ValueError(f"{tokens.shape[0]} tokens do not match geometry with N={g.N}")
    gh, gw = g.grid
    grid = tokens.reshape(gh, gw, -1)
    return grid.repeat(g.P, axis=0).repeat(g.P, axis=1)


def gram_loss(tokens_student: np.ndarray, tokens_teacher: np.ndarray) -> float:
    """Squared Frobenius distance between the two token Gram matrices."""
    if tokens_student.shape != tokens_teacher.shape:
        raise ValueError(f"token shapes differ: {tokens_student.shape} vs {tokens_teacher.shape}")
    diff = tokens_student @ tokens_student.T - tokens_teacher @ tokens_teacher.T
    return float((diff * diff).sum())


class Encoder:
    """Frozen projection plus optional adapter, applied tile by tile."""

    def __init__(
        self,
        geometry: PatchGeometry,
        weights: ProjectionWeights,
        adapter: LoraAdapter | None = None,
        standardize_input: bool = True,
    ):
        self.standardize_input = standardize_input
        if weights.E.shape[0] != geometry.patch_dim:
            raise ValueError(f"projection has {weights.E.shape[0]} rows, geometry needs {geometry.patch_dim}")
        self.geometry = geometry
        self.weights = weights
        self.adapter = adapter

    @classmethod
    def create(cls, geometry: PatchGeometry, D: int, seed: int) -> "Encoder":
        return cls(geometry, ProjectionWeights.init(geometry, D, seed))

    @property
    def D(self) -> int:
        return self.weights.D

    def patches(self, image: np.ndarray) -> np.ndarray:
        """Encoder input rows for one tile (standardized, then patchified)."""
        x = standardize(image) if self.standardize_input else image
        return patchify(x, self.geometry)

    def token_grid(self, image: np.ndarray) -> np.ndarray:
        """``(H/P, W/P, D)`` token grid of one tile."""
        gh, gw = self.geometry.grid
        return embed(self.patches(image), self.weights, self.adapter).reshape(gh, gw, -1)

    def encode(self, images: Sequence[np.ndarray], dtype=np.float32) -> np.ndarray:
        return np.stack([self.token_grid(im) for im in images]).astype(dtype)


class PrecomputedEncoder(Encoder):
    """Serves token grids loaded from a token file instead of projecting pixels."""

    def __init__(self, geometry: PatchGeometry, tokens: Mapping[str, np.ndarray]):
        self.geometry = geometry
        self.tokens = dict(tokens)
        D = next(iter(self.tokens.values())).shape[1] if self.tokens else 0
        self.weights = ProjectionWeights(np.zeros((geometry.patch_dim, D)), seed=-1)
        self.adapter = None
        self.standardize_input = False

    def grid_for(self, tile_id: str) -> np.ndarray:
        if tile_id not in self.tokens:
            raise KeyError(f"no precomputed tokens for tile {tile_id}")
        tok = self.tokens[tile_id]
        gh, gw = self.geometry.grid
        if tok.shape[0] != gh * gw:
            raise ValueError(f"tile {tile_id}: {tok.shape[0]} tokens, geometry needs {gh * gw}")
        return tok.reshape(gh, gw, -1)


def save_tokens(path: str | os.PathLike, tokens: Mapping[str, np.ndarray]) -> None:
    checkpoint.save(path, {tid: np.asarray(t) for tid, t in tokens.items()})


def load_tokens(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read an N x D token record per tile, named by tile_id."""
    records = checkpoint.load(path)
    for name, arr in records.items():
        if arr.ndim != 2:
            raise ValueError(f"{path}: token record {name!r} must be N x D, got {arr.shape}")
    return records
