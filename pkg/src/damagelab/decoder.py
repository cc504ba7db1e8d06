"""Convolutional upsampling head and the focal segmentation loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class DecoderParams:
    """Channel plan: ``in_channels -> widths[0] -> ... -> widths[-1] -> 1``.

    Every width is one stage of ×2 nearest upsampling, 3x3 conv and ReLU, so
    ``len(widths)`` stages undo a patch size of ``2 ** len(widths)``.
    """

    in_channels: int = 64
    widths: tuple[int, ...] = (64, 32, 16, 8)
    kernel: int = 3

    @property
    def scale(self) -> int:
        return 2 ** len(self.widths)

    @classmethod
    def for_patch(cls, in_channels: int, patch: int, widths: tuple[int, ...] | None = None) -> "DecoderParams":
        stages = int(np.log2(patch))
        if 2**stages != patch:
            raise ValueError(f"patch size {patch} is not a power of two")
        if widths is None:
            widths = tuple(max(8, 64 >> i) for i in range(stages))
        if len(widths) != stages:
            raise ValueError(f"patch {patch} needs {stages} decoder stages, got {len(widths)} widths")
        return cls(in_channels, tuple(widths))

    def names(self) -> list[str]:
        out = []
        for i in range(len(self.widths)):
            out += [f"decoder.stage{i}.weight", f"decoder.stage{i}.bias"]
        return out + ["decoder.head.weight", "decoder.head.bias"]


@dataclass(frozen=True)
class FocalParams:
    alpha_focal: float = 0.7
    gamma: float = 2.0
    epsilon_clamp: float = 1e-7

    def __post_init__(self):
        if not 0.0 < self.alpha_focal < 1.0:
            raise ValueError(f"alpha_focal must be in (0, 1), got {self.alpha_focal}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def init_decoder(params: DecoderParams, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-uniform stage weights, zero biases, zero head (so p = 0.5 at start)."""
    rng = np.random.default_rng(seed)
    out: dict[str, np.ndarray] = {}
    cin, k = params.in_channels, params.kernel
    for i, cout in enumerate(params.widths):
        bound = np.sqrt(6.0 / (k * k * cin))
        out[f"decoder.stage{i}.weight"] = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(dtype)
        out[f"decoder.stage{i}.bias"] = np.zeros(cout, dtype=dtype)
        cin = cout
    out["decoder.head.weight"] = np.zeros((1, 1, cin, 1), dtype=dtype)
    out["decoder.head.bias"] = np.zeros(1, dtype=dtype)
    return out


@dataclass
class DecoderOutput:
    logits: dc.Tensor  # (B, H, W)
    probabilities: dc.Tensor  # (B, H, W)
    features: dc.Tensor  # (B, H, W, widths[-1])


def decode(feature_map, params: Mapping[str, dc.Tensor | np.ndarray], spec: DecoderParams) -> DecoderOutput:
    """Run the head on a ``(B, H', W', D)`` token grid (a single grid is promoted)."""
    x = dc.as_tensor(feature_map)
    if x.ndim == 3:
        x = dc.reshape(x, (1,) + x.shape)
    if x.shape[-1] != spec.in_channels:
        raise dc.ShapeError(f"decode: feature map has {x.shape[-1]} channels, decoder expects {spec.in_channels}")
    for i in range(len(spec.widths)):
        x = dc.upsample2x(x)
        x = dc.conv2d(x, params[f"decoder.stage{i}.weight"], params[f"decoder.stage{i}.bias"])
        x = dc.relu(x)
    features = x
    logits = dc.conv2d(x, params["decoder.head.weight"], params["decoder.head.bias"])
    logits = dc.reshape(logits, logits.shape[:3])
    return DecoderOutput(logits, dc.sigmoid(logits), features)


def focal_loss(probabilities, target, fp: FocalParams = FocalParams()) -> dc.Tensor:
    """Mean over pixels of the alpha-balanced two-sided focal loss."""
    target = np.asarray(target)
    if not np.isin(target, (0, 1)).all():
        raise ValueError("focal_loss target must be binary")
    p = dc.clip(probabilities, fp.epsilon_clamp, 1.0 - fp.epsilon_clamp)
    if p.shape != target.shape:
        raise dc.ShapeError(f"focal_loss: probabilities {p.shape} vs target {target.shape}")
    y = target.astype(p.data.dtype)
    a = fp.alpha_focal
    pos = dc.mul(dc.mul(dc.power(dc.sub(1.0, p), fp.gamma), dc.log(p)), a * y)
    neg = dc.mul(dc.mul(dc.power(p, fp.gamma), dc.log(dc.sub(1.0, p))), (1.0 - a) * (1.0 - y))
    return dc.mul(dc.mean(dc.add(pos, neg)), -1.0)


def bce(probabilities, target, eps: float = 1e-7) -> dc.Tensor:
    """Elementwise binary cross-entropy on clamped probabilities."""
    p = dc.clip(probabilities, eps, 1.0 - eps)
    y = np.asarray(target, dtype=p.data.dtype)
    return dc.mul(dc.add(dc.mul(dc.log(p), y), dc.mul(dc.log(dc.sub(1.0, p)), 1.0 - y)), -1.0)
