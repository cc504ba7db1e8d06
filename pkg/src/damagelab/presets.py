"""Named configurations: ``desk`` (small tiles, runs on one CPU core) and ``full`` (full-resolution geometry).

The desk preset uses a larger learning rate and smaller batches than the
full recipe: with 32x32 tiles and about a hundred training tiles per fold,
ten epochs at lr 3e-4 and batch 32 are only ~30 optimizer steps, which is
not enough for a decoder trained from scratch to leave its p = 0.5 start.
"""
from __future__ import annotations

from .trainer import FewShotConfig, TrainConfig

PRESETS: dict[str, dict] = {
    "desk": {
        "regions": 4,
        "tiles_per_region": 40,
        "tile_size": 32,
        "patch": 4,
        "dim": 16,
        "decoder_widths": [16, 8],
        "train": {"lr": 3e-2, "batch_size": 8},
        "fewshot": {"lr": 3e-3},
    },
    "full": {
        "regions": 9,
        "tiles_per_region": 40,
        "tile_size": 128,
        "patch": 16,
        "dim": 64,
        "decoder_widths": [64, 32, 16, 8],
        "train": {},
        "fewshot": {},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    p = PRESETS[name]
    return {**p, "train": dict(p["train"]), "fewshot": dict(p["fewshot"]), "decoder_widths": list(p["decoder_widths"])}


def train_config(name: str = "desk", **overrides) -> TrainConfig:
    return TrainConfig(**{**preset(name)["train"], **overrides})


def fewshot_config(name: str = "desk", **overrides) -> FewShotConfig:
    return FewShotConfig(**{**preset(name)["fewshot"], **overrides})
