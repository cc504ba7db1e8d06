"""Joint decoder training under the focal + PC + DPT objective, and adapter fine-tuning.

Optimizer: AdamW with decoupled weight decay (``p <- p * (1 - lr * wd)``
before the adaptive step), bias-corrected moments, global-norm clipping and a
cosine schedule with floor 0. Every auxiliary term with weight 0 is skipped
entirely, so a zero-weight run replays the plain focal run bit for bit.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from . import dpt as dptm
from . import pc as pcm
from .dataset import TileRecord
from .decoder import DecoderParams, FocalParams, decode, focal_loss, init_decoder
from .diffcore import checkpoint
from .encoder import Encoder, LoraAdapter, PatchGeometry, ProjectionWeights, embed_tensor

VARIANTS = ("FS", "PC", "DPT", "PC+DPT")


class TrainingError(RuntimeError):
    """Raised when a loss component becomes non-finite."""


def variant_flags(variant: str) -> tuple[bool, bool]:
    v = variant.upper()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return "PC" in v, "DPT" in v


def derive_seed(seed: int, *keys) -> int:
    """Stable sub-seed from ``seed`` and string/int keys."""
    words = [seed & 0xFFFFFFFF] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    grad_clip: float = 1.0
    lambda_pc: float = 0.01
    lambda_dpt: float = 0.001
    seed: int = 0
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    K_pos: int = 32
    K_neg: int = 32
    kmeans_passes: int = 3
    kmeans_batch: int = 1024
    alpha_focal: float = 0.7
    gamma: float = 2.0
    epsilon_clamp: float = 1e-7
    tau_b: float = 0.02
    tau_u: float = 0.02
    tau_d: float = 0.10
    alpha_margin: float = 0.2
    max_triplets: int = 16
    dpt_grid: int = 4

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "grad_clip", "K_pos", "K_neg", "kmeans_passes", "kmeans_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "lambda_pc", "lambda_dpt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        self.focal()
        self.dpt()

    def focal(self) -> FocalParams:
        return FocalParams(self.alpha_focal, self.gamma, self.epsilon_clamp)

    def dpt(self) -> dptm.DptParams:
        return dptm.DptParams(self.tau_b, self.tau_u, self.tau_d, self.alpha_margin, self.max_triplets, self.dpt_grid)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def for_variant(self, variant: str) -> "TrainConfig":
        """Zero the weight of every auxiliary loss the variant does not use."""
        use_pc, use_dpt = variant_flags(variant)
        return self.replace(
            lambda_pc=self.lambda_pc if use_pc else 0.0,
            lambda_dpt=self.lambda_dpt if use_dpt else 0.0,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FewShotConfig:
    shots: int = 1
    lora_rank: int = 4
    lr: float = 3e-5
    epochs: int = 3
    batch_size: int = 32
    weight_decay: float = 1e-4
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.shots < 0:
            raise ValueError(f"shots must be >= 0, got {self.shots}")
        if self.lora_rank < 1:
            raise ValueError(f"lora_rank must be >= 1, got {self.lora_rank}")
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("few-shot lr, epochs and batch_size must be positive")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


# -- objective pieces ---------------------------------------------------------------


def _scalar(v) -> float:
    return float(np.asarray(v.data if isinstance(v, dc.Tensor) else v).reshape(-1)[0])


def total_loss(seg, pc=None, dpt=None, cfg: TrainConfig = TrainConfig()):
    """``seg + lambda_pc * pc + lambda_dpt * dpt``; terms with weight 0 or ``None`` are skipped."""
    for name, v in (("L_SEG", seg), ("L_PC", pc), ("L_DPT", dpt)):
        if v is not None and not math.isfinite(_scalar(v)):
            raise TrainingError(f"{name} is not finite ({_scalar(v)})")
    out = seg
    if pc is not None and cfg.lambda_pc:
        out = out + cfg.lambda_pc * pc
    if dpt is not None and cfg.lambda_dpt:
        out = out + cfg.lambda_dpt * dpt
    return out


def cosine_lr(step: int, total_steps: int, lr: float | TrainConfig) -> float:
    base = lr.lr if isinstance(lr, TrainConfig) else float(lr)
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by ``min(1, max_norm / (norm + 1e-6))``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.square(g, dtype=np.float64).sum()) for g in grads.values()))
    coef = max_norm / (norm + 1e-6)
    if coef >= 1.0:
        return dict(grads), norm
    return {k: (g * coef).astype(g.dtype) for k, g in grads.items()}, norm


class AdamW:
    def __init__(self, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        """Update ``params`` in place (arrays are replaced, never mutated)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k in sorted(params):
            p = params[k]
            g = grads[k].astype(p.dtype, copy=False)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            denom = np.sqrt(self.v[k] / c2) + self.eps
            decayed = p * (1.0 - lr * self.weight_decay)
            params[k] = (decayed - lr * (self.m[k] / c1) / denom).astype(p.dtype)


# -- model --------------------------------------------------------------------------


@dataclass
class Model:
    geometry: PatchGeometry
    decoder_spec: DecoderParams
    projection: ProjectionWeights
    decoder: dict[str, np.ndarray]
    adapter: LoraAdapter | None = None
    standardize_input: bool = True

    @property
    def D(self) -> int:
        return self.projection.D

    def encoder(self) -> Encoder:
        return Encoder(self.geometry, self.projection, self.adapter, self.standardize_input)

    def tokens(self, images: Sequence[np.ndarray]) -> np.ndarray:
        return self.encoder().encode(images)

    def predict_tokens(self, tokens: np.ndarray, chunk: int = 16) -> np.ndarray:
        """Probabilities ``(B, H, W)`` for stacked token grids ``(B, H/P, W/P, D)``."""
        out = [
            decode(tokens[i : i + chunk], self.decoder, self.decoder_spec).probabilities.data
            for i in range(0, len(tokens), chunk)
        ]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.geometry.H, self.geometry.W))

    def predict(self, images: Sequence[np.ndarray]) -> np.ndarray:
        return self.predict_tokens(self.tokens(images))

    def records(self) -> dict[str, np.ndarray]:
        g, s = self.geometry, self.decoder_spec
        rec = {
            "meta.geometry": np.array([g.H, g.W, g.C, g.P]),
            "meta.decoder": np.array([s.in_channels, s.kernel, *s.widths]),
            "meta.encoder": np.array([self.projection.seed, int(self.standardize_input)]),
            "encoder.E": self.projection.E,
        }
        rec.update({k: self.decoder[k] for k in s.names()})
        if self.adapter is not None:
            rec["adapter.A"] = self.adapter.A
            rec["adapter.B"] = self.adapter.B
            rec["meta.adapter"] = np.array([self.adapter.scale])
        return rec

    def save(self, path: str | os.PathLike) -> None:
        checkpoint.save(path, self.records())

    @classmethod
    def from_records(cls, rec: Mapping[str, np.ndarray], source: str = "<records>") -> "Model":
        try:
            H, W, C, P = (int(v) for v in rec["meta.geometry"])
            dec = [int(v) for v in rec["meta.decoder"]]
            seed, std = (int(v) for v in rec["meta.encoder"])
            E = rec["encoder.E"]
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"{source}: missing record {exc.args[0]}") from None
        geometry = PatchGeometry(H, W, C, P)
        spec = DecoderParams(dec[0], tuple(dec[2:]), dec[1])
        if E.shape[1] != spec.in_channels:
            raise checkpoint.CheckpointError(
                f"{source}: encoder D={E.shape[1]} does not match decoder input channels {spec.in_channels}"
            )
        missing = [n for n in spec.names() if n not in rec]
        if missing:
            raise checkpoint.CheckpointError(f"{source}: missing decoder records {missing}")
        adapter = None
        if "adapter.A" in rec:
            adapter = LoraAdapter(rec["adapter.A"], rec["adapter.B"], float(rec["meta.adapter"][0]))
        return cls(geometry, spec, ProjectionWeights(E, seed), {n: rec[n] for n in spec.names()}, adapter, bool(std))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Model":
        return cls.from_records(checkpoint.load(path), str(path))


# -- training -----------------------------------------------------------------------


@dataclass
class EpochTrace:
    epoch: int
    seg: float
    pc: float | None
    dpt: float | None
    total: float
    lr: float


@dataclass
class TrainResult:
    model: Model
    trace: list[EpochTrace]
    prototypes: pcm.PrototypeSet | None = None
    train_ids: list[str] = field(default_factory=list)


def _batch_dpt(features: dc.Tensor, tile_ids, labels, centers, params: dptm.DptParams, seed: int, epoch: int):
    """Per-tile mean hinge, averaged over the tiles of the batch (tiles without triplets count as 0)."""
    B = features.shape[0]
    g = params.grid
    pooled = dc.reshape(dc.grid_avg_pool(features, g), (B * g * g, features.shape[-1]))
    triplets, weights = [], []
    for b, tid in enumerate(tile_ids):
        ts = dptm.sample_triplets(labels[b], centers, params, dptm.triplet_seed(seed, tid, epoch))
        off = b * g * g
        triplets += [dptm.Triplet(t.anchor + off, t.positive + off, t.negative + off, t.penalty) for t in ts]
        weights += [1.0 / (len(ts) * B)] * len(ts)
    if not triplets:
        return dc.Tensor(np.zeros((), dtype=features.data.dtype))
    return dptm.weighted_hinge(pooled, triplets, np.array(weights), params.alpha_margin)


def objective(
    params: Mapping[str, dc.Tensor | np.ndarray],
    tokens: np.ndarray | dc.Tensor,
    damage: np.ndarray,
    cfg: TrainConfig,
    spec: DecoderParams,
    *,
    pseudo: np.ndarray | None = None,
    dpt_labels: Sequence[np.ndarray] | None = None,
    tile_ids: Sequence[str] = (),
    epoch: int = 0,
):
    """Loss terms of one batch. ``pseudo`` (B, H, W) enables PC; ``dpt_labels`` enables DPT."""
    out = decode(tokens, params, spec)
    seg = focal_loss(out.probabilities, damage, cfg.focal())
    pc = dpt = None
    if pseudo is not None and cfg.lambda_pc:
        pc = pcm.pc_loss(out.probabilities, pcm.PseudoLabelMap(pseudo, pseudo == damage), cfg.epsilon_clamp)
    if dpt_labels is not None and cfg.lambda_dpt:
        H, W = damage.shape[1:]
        centers = dptm.patch_centers(H, W, cfg.dpt_grid)
        dpt = _batch_dpt(out.features, tile_ids, dpt_labels, centers, cfg.dpt(), cfg.seed, epoch)
    return seg, pc, dpt


def _pseudo_pixels(grid: np.ndarray, protos: pcm.PrototypeSet, P: int) -> np.ndarray:
    y = (pcm.nearest_prototype(grid, protos) < protos.K_pos).astype(np.uint8)
    return y.repeat(P, axis=0).repeat(P, axis=1)


def train_fold(
    train_tiles: Sequence[TileRecord],
    cfg: TrainConfig,
    variant: str = "FS",
    *,
    encoder: Encoder,
    decoder_spec: DecoderParams | None = None,
    tokens: Mapping[str, np.ndarray] | None = None,
    run_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """Train a fresh decoder on ``train_tiles``; deterministic in ``cfg.seed``."""
    if not train_tiles:
        raise ValueError("train_fold needs a non-empty training set")
    cfg = cfg.for_variant(variant)
    use_pc, use_dpt = cfg.lambda_pc > 0, cfg.lambda_dpt > 0
    tiles = sorted(train_tiles, key=lambda t: t.tile_id)
    geom = encoder.geometry
    spec = decoder_spec or DecoderParams.for_patch(encoder.D, geom.P)
    grids = {t.tile_id: (tokens[t.tile_id] if tokens is not None else encoder.token_grid(t.image)).astype(np.float32)
             for t in tiles}
    dpt_labels = {}
    if use_dpt:
        p = cfg.dpt()
        dpt_labels = {t.tile_id: dptm.label_patches(t.footprint_mask, t.damage_mask, p.grid, p)[0] for t in tiles}

    params = init_decoder(spec, derive_seed(cfg.seed, "decoder"))
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    n = len(tiles)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    step = 0
    trace: list[EpochTrace] = []
    protos = None
    for epoch in range(cfg.epochs):
        order = [tiles[i] for i in shuffle.permutation(n)]
        pseudo = {}
        if use_pc:
            emb, lab, w = pcm.pixel_stream((grids[t.tile_id] for t in order), (t.damage_mask for t in order), geom.P)
            protos = pcm.build_prototypes(
                emb, lab, cfg.K_pos, cfg.K_neg, derive_seed(cfg.seed, "pc", epoch), w,
                cfg.kmeans_batch, cfg.kmeans_passes, built_from=f"epoch {epoch}",
            )
            pseudo = {t.tile_id: _pseudo_pixels(grids[t.tile_id], protos, geom.P) for t in tiles}
        sums = {"seg": 0.0, "pc": 0.0, "dpt": 0.0, "total": 0.0}
        lr = cfg.lr
        for b in range(per_epoch):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            ids = [t.tile_id for t in batch]
            x = np.stack([grids[i] for i in ids])
            y = np.stack([t.damage_mask for t in batch])
            leaves = {k: dc.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
            seg, pc, dpt = objective(
                leaves, x, y, cfg, spec,
                pseudo=np.stack([pseudo[i] for i in ids]) if use_pc else None,
                dpt_labels=[dpt_labels[i] for i in ids] if use_dpt else None,
                tile_ids=ids, epoch=epoch,
            )
            try:
                loss = total_loss(seg, pc, dpt, cfg)
            except TrainingError as exc:
                raise TrainingError(f"step {step} (epoch {epoch}): {exc}") from None
            if not math.isfinite(_scalar(loss)):
                raise TrainingError(f"step {step} (epoch {epoch}): L_ST is not finite")
            dc.tensor.backward(loss)
            grads = {k: leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v) for k, v in params.items()}
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
            lr = cosine_lr(step, total_steps, cfg.lr)
            opt.step(params, grads, lr)
            step += 1
            sums["seg"] += _scalar(seg)
            sums["pc"] += _scalar(pc) if pc is not None else 0.0
            sums["dpt"] += _scalar(dpt) if dpt is not None else 0.0
            sums["total"] += _scalar(loss)
        trace.append(
            EpochTrace(
                epoch,
                sums["seg"] / per_epoch,
                sums["pc"] / per_epoch if use_pc else None,
                sums["dpt"] / per_epoch if use_dpt else None,
                sums["total"] / per_epoch,
                lr,
            )
        )
    model = Model(geom, spec, encoder.weights, params, None, encoder.standardize_input)
    result = TrainResult(model, trace, protos, [t.tile_id for t in tiles])
    if run_dir is not None:
        write_run_dir(run_dir, result, cfg, variant)
    return result


# -- few-shot adaptation --------------------------------------------------------------


def few_shot_finetune(model: Model, shots: Sequence[TileRecord], fsc: FewShotConfig, cfg: TrainConfig = TrainConfig()) -> Model:
    """Train only a fresh low-rank adapter on ``shots`` with the focal loss.

    ``fsc.shots == 0`` returns ``model`` untouched. Decoder and projection are
    passed as constants, so their bytes cannot change.
    """
    if fsc.shots == 0:
        return model
    if not shots:
        raise ValueError(f"few-shot fine-tuning with shots={fsc.shots} needs at least one labeled tile")
    geom = model.geometry
    enc = model.encoder()
    adapter = LoraAdapter.init(geom.patch_dim, model.D, fsc.lora_rank, derive_seed(fsc.seed, "adapter"), fsc.scale)
    params = {"adapter.A": adapter.A, "adapter.B": adapter.B}
    opt = AdamW(params, cfg.beta1, cfg.beta2, cfg.eps, fsc.weight_decay)
    tiles = sorted(shots, key=lambda t: t.tile_id)
    patches = {t.tile_id: enc.patches(t.image).astype(np.float32) for t in tiles}
    E = model.projection.E
    gh, gw = geom.grid
    shuffle = np.random.default_rng(derive_seed(fsc.seed, "shuffle"))
    per_epoch = math.ceil(len(tiles) / fsc.batch_size)
    total_steps = fsc.epochs * per_epoch
    step = 0
    for epoch in range(fsc.epochs):
        order = [tiles[i] for i in shuffle.permutation(len(tiles))]
        for b in range(per_epoch):
            batch = order[b * fsc.batch_size : (b + 1) * fsc.batch_size]
            A = dc.Tensor(params["adapter.A"], requires_grad=True)
            B = dc.Tensor(params["adapter.B"], requires_grad=True)
            x = np.concatenate([patches[t.tile_id] for t in batch])
            tok = embed_tensor(x, E, A, B, fsc.scale)
            tok = dc.reshape(tok, (len(batch), gh, gw, model.D))
            out = decode(tok, model.decoder, model.decoder_spec)
            loss = focal_loss(out.probabilities, np.stack([t.damage_mask for t in batch]), cfg.focal())
            if not math.isfinite(_scalar(loss)):
                raise TrainingError(f"few-shot step {step}: L_SEG is not finite")
            dc.tensor.backward(loss)
            grads = {"adapter.A": A.grad, "adapter.B": B.grad}
            grads, _ = clip_grad_norm(grads, cfg.grad_clip)
            opt.step(params, grads, cosine_lr(step, total_steps, fsc.lr))
            step += 1
    return dataclasses.replace(
        model, adapter=LoraAdapter(params["adapter.A"], params["adapter.B"], fsc.scale)
    )


# -- run directory ---------------------------------------------------------------------

TRACE_FIELDS = ("epoch", "L_SEG", "L_PC", "L_DPT", "L_ST", "lr")


def trace_csv(trace: Sequence[EpochTrace]) -> str:
    from .metrics import fmt

    lines = [",".join(TRACE_FIELDS)]
    for e in trace:
        cells = [str(e.epoch), fmt(e.seg), "" if e.pc is None else fmt(e.pc), "" if e.dpt is None else fmt(e.dpt),
                 fmt(e.total), fmt(e.lr)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def read_trace(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run_dir(run_dir: str | os.PathLike, result: TrainResult, cfg: TrainConfig, variant: str, extra: Mapping | None = None):
    root = Path(run_dir)
    root.mkdir(parents=True, exist_ok=True)
    resolved = {"variant": variant, "train": cfg.to_json(), "train_ids": result.train_ids}
    if extra:
        resolved.update(extra)
    (root / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    (root / "trace.csv").write_text(trace_csv(result.trace))
    result.model.save(root / "params.ckpt")
