"""Cross-region experiment protocols and report emission.

A protocol expands into independent cells ``(setting, variant, fold, extra)``.
Every cell trains one decoder (seeded by the experiment seed and fold only,
so identical training sets give identical models across protocols),
evaluates it, and checks mechanically that no evaluated tile was trained on.
Cells run on a thread pool; results are assembled in cell order, so reports
do not depend on the thread count.

Protocols
    FULL_SUP      folds inside each region, evaluate on the held-out fold
    LODO          train on all other regions (folds of that pool), evaluate on the whole held-out region
    SSDC          train on a region combination; evaluate every region (source regions on
                  their held-out fold) and macro-average
    TRAIN_RATIO   SSDC with each fold's training tiles subsampled per stratum
    WEIGHT_SWEEP  LODO over a grid of auxiliary loss weights
    FEW_SHOT      LODO and SSDC models adapted on k target tiles, evaluated on the rest
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import ABBREVIATIONS, Dataset, TileRecord, plan_folds, subsample
from .decoder import DecoderParams
from .encoder import Encoder, PatchGeometry
from .metrics import ConfusionCounts, building_counts, building_decisions, fmt, report_from_counts
from .trainer import VARIANTS, FewShotConfig, Model, TrainConfig, derive_seed, few_shot_finetune, train_fold

PROTOCOLS = ("FULL_SUP", "LODO", "SSDC", "TRAIN_RATIO", "WEIGHT_SWEEP", "FEW_SHOT")
DEFAULT_COMBOS = (("Kah",), ("Nur",), ("Kah", "Nur"), ("Kah", "Hat"), ("Nur", "Hat"), ("Kah", "Nur", "Hat"))
DEFAULT_RATIOS = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_SHOTS = (0, 1, 3, 5, 10)
DEFAULT_WEIGHTS = (0.1, 0.01, 0.001)
METRICS = ("miou", "f1")


class LeakageError(AssertionError):
    pass


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "LODO"
    variants: tuple[str, ...] = ("FS", "PC")
    source_combos: tuple[tuple[str, ...], ...] | None = None
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    shot_counts: tuple[int, ...] = DEFAULT_SHOTS
    weights: tuple[float, ...] = DEFAULT_WEIGHTS
    folds: int = 5
    seed: int = 0
    patch: int = 4
    dim: int = 16
    decoder_widths: tuple[int, ...] | None = None
    encoder_seed: int = 0
    train: TrainConfig = TrainConfig()
    fewshot: FewShotConfig = FewShotConfig()
    threads: int = 1
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ExperimentError(f"unknown protocol {self.protocol!r}; expected one of {', '.join(PROTOCOLS)}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ExperimentError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
        if self.folds < 2:
            raise ExperimentError(f"folds must be >= 2, got {self.folds}")
        for r in self.ratios:
            if not 0.0 < r <= 1.0:
                raise ExperimentError(f"ratio {r} outside (0, 1]")
        for k in self.shot_counts:
            if k < 0:
                raise ExperimentError(f"shot count {k} is negative")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_json()
        d["fewshot"] = self.fewshot.to_json()
        return d


# -- report ---------------------------------------------------------------------


@dataclass
class Row:
    setting: str
    variant: str
    values: dict[str, list[float]]  # metric -> per-fold values
    extra: str = ""  # e.g. "ratio=0.2", "shots=3"
    detail: dict = field(default_factory=dict)  # per-region per-fold values, JSON only

    @property
    def key(self) -> str:
        return f"{self.setting};{self.extra}" if self.extra else self.setting

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def std(self, metric: str) -> float:
        """Population std over exactly the fold values."""
        return float(np.std(self.values[metric]))


@dataclass
class CellRecord:
    setting: str
    variant: str
    fold: int
    extra: str
    train_ids: frozenset[str]
    eval_ids: frozenset[str]


@dataclass
class ExperimentReport:
    protocol: str
    rows: list[Row]
    folds: int
    config: dict = field(default_factory=dict)
    cells: list[CellRecord] = field(default_factory=list)

    def row(self, setting: str, variant: str, extra: str = "") -> Row:
        for r in self.rows:
            if (r.setting, r.variant, r.extra) == (setting, variant, extra):
                return r
        raise KeyError((setting, variant, extra))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("protocol", "setting", "variant", "metric", "fold", "value"))
        for r in self.rows:
            for metric in METRICS:
                for k, v in enumerate(r.values[metric]):
                    w.writerow((self.protocol, r.key, r.variant, metric, k, fmt(v)))
                w.writerow((self.protocol, r.key, r.variant, metric, "mean", fmt(r.mean(metric))))
                w.writerow((self.protocol, r.key, r.variant, metric, "std", fmt(r.std(metric))))
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            entry = {"setting": r.setting, "variant": r.variant, "extra": r.extra}
            for metric in METRICS:
                entry[metric] = {"mean": r.mean(metric), "std": r.std(metric), "folds": list(map(float, r.values[metric]))}
            if r.detail:
                entry["regions"] = r.detail
            rows.append(entry)
        doc = {"protocol": self.protocol, "folds": self.folds, "config": self.config, "rows": rows}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        lines = [f"# {self.protocol}", "", "| setting | extra | variant | mIoU | F1 |", "|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(
                f"| {r.setting} | {r.extra} | {r.variant} | {r.mean('miou'):.4f} ± {r.std('miou'):.4f} "
                f"| {r.mean('f1'):.4f} ± {r.std('f1'):.4f} |"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "report.json").write_text(self.to_json())
        (out / "summary.md").write_text(self.to_markdown())


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    pixels: ConfusionCounts
    buildings: ConfusionCounts

    @property
    def miou(self) -> float:
        return report_from_counts(self.pixels).miou

    @property
    def f1(self) -> float:
        return report_from_counts(self.buildings).f1

    def metric(self, name: str) -> float:
        return getattr(self, name)


def evaluate_model(
    model: Model,
    tiles: Sequence[TileRecord],
    tokens: Mapping[str, np.ndarray] | None = None,
    building_maps: Mapping[str, np.ndarray] | None = None,
) -> EvalResult:
    """Pixel confusion and building decisions pooled over ``tiles``.

    Cached ``tokens`` are only used for models without an adapter.
    """
    tiles = sorted(tiles, key=lambda t: t.tile_id)
    if tokens is not None and model.adapter is None:
        grids = np.stack([tokens[t.tile_id] for t in tiles]) if tiles else None
    else:
        grids = model.tokens([t.image for t in tiles]) if tiles else None
    probs = model.predict_tokens(grids) if tiles else []
    px, bd = ConfusionCounts(), ConfusionCounts()
    for t, p in zip(tiles, probs):
        px = px + ConfusionCounts.from_masks(p >= 0.5, t.damage_mask)
        ids = building_maps[t.tile_id] if building_maps is not None else t.building_ids()
        bd = bd + building_counts(building_decisions(p, t.damage_mask, ids))
    return EvalResult(px, bd)


def macro(results: Mapping[str, EvalResult], metric: str) -> float:
    return float(np.mean([results[r].metric(metric) for r in sorted(results)]))


# -- experiment runner ----------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    setting: str
    variant: str
    fold: int
    extra: str
    train_ids: tuple[str, ...]
    eval_sets: tuple[tuple[str, tuple[str, ...]], ...]  # (region, tile ids)
    train_cfg: TrainConfig
    ckpt: str | None = None


class Runner:
    def __init__(self, dataset: Dataset, cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None):
        self.dataset = dataset
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.by_id = {t.tile_id: t for t in dataset.tiles}
        first = dataset.tiles[0]
        H, W, C = first.image.shape
        self.geometry = PatchGeometry(H, W, C, cfg.patch)
        self.encoder = Encoder.create(self.geometry, cfg.dim, cfg.encoder_seed)
        self.spec = DecoderParams.for_patch(cfg.dim, cfg.patch, cfg.decoder_widths)
        self.tokens = {t.tile_id: self.encoder.token_grid(t.image).astype(np.float32) for t in dataset.tiles}
        self.building_maps = {t.tile_id: t.building_ids() for t in dataset.tiles}
        self.cells: list[CellRecord] = []
        self._models: dict[tuple, Model] = {}

    # -- helpers
    def regions(self) -> list[str]:
        out = []
        for r in self.dataset.regions:
            if self.dataset.region_tiles(r):
                out.append(r)
            else:
                warnings.warn(f"region {r} has no labeled tiles; skipped", stacklevel=3)
        return out

    def resolve_region(self, name: str) -> str:
        full = ABBREVIATIONS.get(name, name)
        if full not in self.dataset.regions:
            raise ExperimentError(f"unknown region {name!r} in source combination")
        return full

    def combos(self) -> list[tuple[str, ...]]:
        raw = self.cfg.source_combos
        if raw is None:
            known = [a for a, full in ABBREVIATIONS.items() if full in self.dataset.regions]
            raw = tuple(c for c in DEFAULT_COMBOS if all(a in known for a in c))
            if not raw:
                raw = tuple((r,) for r in self.dataset.regions[:2])
        return [tuple(self.resolve_region(n) for n in combo) for combo in raw]

    @staticmethod
    def combo_name(combo: Sequence[str]) -> str:
        short = {v: k for k, v in ABBREVIATIONS.items()}
        return "+".join(short.get(r, r) for r in combo)

    def ckpt_path(self, *parts) -> str | None:
        if self.out_dir is None or not self.cfg.save_checkpoints:
            return None
        safe = [str(p).replace("/", "_").replace(";", "_").replace("=", "-") for p in parts]
        return str(self.out_dir.joinpath("checkpoints", *safe[:-1], f"{safe[-1]}.ckpt"))

    def train_cfg(self, fold: int, **changes) -> TrainConfig:
        return self.cfg.train.replace(seed=derive_seed(self.cfg.seed, "fold", fold), **changes)

    # -- execution
    def model_for(self, cell: Cell) -> Model:
        key = (cell.train_ids, cell.variant, cell.train_cfg)
        model = self._models.get(key)
        if model is None:
            tiles = [self.by_id[i] for i in cell.train_ids]
            model = train_fold(tiles, cell.train_cfg, cell.variant, encoder=self.encoder,
                               decoder_spec=self.spec, tokens=self.tokens).model
            self._models[key] = model
        return model

    def run_cell(self, cell: Cell) -> dict[str, EvalResult]:
        train = set(cell.train_ids)
        for region, ids in cell.eval_sets:
            overlap = train.intersection(ids)
            if overlap:
                raise LeakageError(f"{cell.setting}/{cell.variant}/fold {cell.fold}: {len(overlap)} tiles trained and evaluated")
        model = self.model_for(cell)
        if cell.ckpt:
            Path(cell.ckpt).parent.mkdir(parents=True, exist_ok=True)
            model.save(cell.ckpt)
        return {r: evaluate_model(model, [self.by_id[i] for i in ids], self.tokens, self.building_maps) for r, ids in cell.eval_sets}

    def run_cells(self, cells: Sequence[Cell], fn: Callable[[Cell], dict] | None = None) -> list[dict]:
        fn = fn or self.run_cell
        for c in cells:
            self.cells.append(CellRecord(c.setting, c.variant, c.fold, c.extra, frozenset(c.train_ids),
                                         frozenset(i for _, ids in c.eval_sets for i in ids)))
        if self.cfg.threads > 1:
            with ThreadPoolExecutor(self.cfg.threads) as pool:
                return list(pool.map(fn, cells))
        return [fn(c) for c in cells]

    def record_shot_cell(self, setting, variant, fold, extra, train_ids, eval_ids):
        overlap = set(train_ids).intersection(eval_ids)
        if overlap:
            raise LeakageError(f"{setting}/{variant}/fold {fold}/{extra}: shot tiles {sorted(overlap)[:3]} are evaluated")
        self.cells.append(CellRecord(setting, variant, fold, extra, frozenset(train_ids), frozenset(eval_ids)))

    # -- plans
    def fold_plan(self, tiles: Sequence[TileRecord]):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return plan_folds(tiles, self.cfg.folds, self.cfg.seed)

    def lodo_cells(self, variants, train_changes: Mapping | None = None, tag: str = "LODO") -> list[Cell]:
        regions = self.regions()
        if len(regions) < 2:
            raise ExperimentError("LODO needs at least two regions with labeled tiles")
        cells = []
        for held in regions:
            source = [t for r in regions if r != held for t in self.dataset.region_tiles(r)]
            plan = self.fold_plan(source)
            target = tuple(t.tile_id for t in self.dataset.region_tiles(held))
            for v in variants:
                for k in range(self.cfg.folds):
                    extra = ";".join(f"{a}={b}" for a, b in (train_changes or {}).items())
                    cells.append(Cell(held, v, k, extra, tuple(plan.train_ids(k)), ((held, target),),
                                      self.train_cfg(k, **(train_changes or {})),
                                      self.ckpt_path(tag, extra or "base", held, v, f"fold{k}")))
        return cells

    def ssdc_cells(self, variants, ratio: float = 1.0, tag: str = "SSDC") -> list[Cell]:
        regions = self.regions()
        cells = []
        for combo in self.combos():
            source = [t for r in combo for t in self.dataset.region_tiles(r)]
            plan = self.fold_plan(source)
            name = self.combo_name(combo)
            for v in variants:
                for k in range(self.cfg.folds):
                    train_ids = plan.train_ids(k)
                    extra = ""
                    if ratio < 1.0:
                        extra = f"ratio={fmt(ratio)}"
                        kept = subsample([self.by_id[i] for i in train_ids], ratio, derive_seed(self.cfg.seed, "ratio", k))
                        train_ids = [t.tile_id for t in kept]
                        if not train_ids:
                            warnings.warn(f"ratio {ratio} leaves no training tiles for {name}", stacklevel=2)
                            continue
                    held = set(plan.fold(k))
                    evals = []
                    for r in regions:
                        ids = [t.tile_id for t in self.dataset.region_tiles(r)]
                        if r in combo:
                            ids = [i for i in ids if i in held]
                        evals.append((r, tuple(ids)))
                    cells.append(Cell(name, v, k, extra, tuple(train_ids), tuple(evals), self.train_cfg(k),
                                      self.ckpt_path(tag, extra or "base", name, v, f"fold{k}")))
        return cells

    def full_sup_cells(self, variants) -> list[Cell]:
        cells = []
        for region in self.regions():
            tiles = self.dataset.region_tiles(region)
            plan = self.fold_plan(tiles)
            for v in variants:
                for k in range(self.cfg.folds):
                    cells.append(Cell(region, v, k, "", tuple(plan.train_ids(k)), ((region, tuple(plan.fold(k))),),
                                      self.train_cfg(k), self.ckpt_path("FULL_SUP", region, v, f"fold{k}")))
        return cells


def _fold_rows(cells: Sequence[Cell], results: Sequence[dict], folds: int, per_setting: bool = True,
               overall: str | None = "Overall") -> list[Row]:
    """Rows per (setting, variant, extra) with macro values per fold, plus overall rows."""
    groups: dict[tuple[str, str, str], dict[int, dict[str, EvalResult]]] = {}
    order: list[tuple[str, str, str]] = []
    for c, res in zip(cells, results):
        key = (c.setting, c.variant, c.extra)
        if key not in groups:
            groups[key] = {}
            order.append(key)
        groups[key][c.fold] = res
    rows = []
    for setting, variant, extra in order:
        per_fold = groups[(setting, variant, extra)]
        values = {m: [macro(per_fold[k], m) for k in sorted(per_fold)] for m in METRICS}
        detail = {}
        regions = sorted(next(iter(per_fold.values())))
        if len(regions) > 1:
            detail = {r: {m: [per_fold[k][r].metric(m) for k in sorted(per_fold)] for m in METRICS} for r in regions}
        rows.append(Row(setting, variant, values, extra, detail))
    if overall is not None:
        seen = []
        for _, variant, extra in order:
            if (variant, extra) not in seen:
                seen.append((variant, extra))
        agg = []
        for variant, extra in seen:
            members = [r for r in rows if r.variant == variant and r.extra == extra]
            values = {m: [float(np.mean([r.values[m][k] for r in members])) for k in range(len(members[0].values[m]))]
                      for m in METRICS}
            agg.append(Row(overall, variant, values, extra))
        rows = (rows if per_setting else []) + agg
    return rows


def run_full_supervision(dataset: Dataset, cfg: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> ExperimentReport:
    runner = runner or Runner(dataset, cfg, out_dir)
    cells = runner.full_sup_cells(cfg.variants)
    rows = _fold_rows(cells, runner.run_cells(cells), cfg.folds)
    return ExperimentReport("FULL_SUP", rows, cfg.folds, cfg.to_json(), runner.cells)


def run_lodo(dataset: Dataset, cfg: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> ExperimentReport:
    runner = runner or Runner(dataset, cfg, out_dir)
    cells = runner.lodo_cells(cfg.variants)
    rows = _fold_rows(cells, runner.run_cells(cells), cfg.folds)
    return ExperimentReport("LODO", rows, cfg.folds, cfg.to_json(), runner.cells)


def run_ssdc(dataset: Dataset, cfg: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> ExperimentReport:
    runner = runner or Runner(dataset, cfg, out_dir)
    cells = runner.ssdc_cells(cfg.variants)
    rows = _fold_rows(cells, runner.run_cells(cells), cfg.folds)
    return ExperimentReport("SSDC", rows, cfg.folds, cfg.to_json(), runner.cells)


def run_train_ratio_sweep(dataset: Dataset, cfg: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> ExperimentReport:
    """One row per (ratio, variant): the SSDC overall value at that ratio."""
    runner = runner or Runner(dataset, cfg, out_dir)
    rows = []
    for ratio in cfg.ratios:
        cells = runner.ssdc_cells(cfg.variants, ratio, tag="TRAIN_RATIO")
        if not cells:
            continue
        for r in _fold_rows(cells, runner.run_cells(cells), cfg.folds, per_setting=False):
            rows.append(Row(f"ratio={fmt(ratio)}", r.variant, r.values))
    return ExperimentReport("TRAIN_RATIO", rows, cfg.folds, cfg.to_json(), runner.cells)


def weight_grid(weights: Sequence[float]) -> list[tuple[str, float, float]]:
    """(variant, lambda_pc, lambda_dpt) cells: PC-only, DPT-only, then the joint grid."""
    grid = [("PC", w, 0.0) for w in weights] + [("DPT", 0.0, w) for w in weights]
    grid += [("PC+DPT", a, b) for a in weights for b in weights]
    return grid


def run_weight_sweep(dataset: Dataset, cfg: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> ExperimentReport:
    """LODO overall per loss-weight cell, plus the FS baseline row."""
    runner = runner or Runner(dataset, cfg, out_dir)
    rows = []
    jobs = [("FS", 0.0, 0.0)] + weight_grid(cfg.weights)
    for variant, lpc, ldpt in jobs:
        changes = {"lambda_pc": lpc, "lambda_dpt": ldpt}
        cells = runner.lodo_cells((variant,), changes, tag="WEIGHT_SWEEP")
        overall = _fold_rows(cells, runner.run_cells(cells), cfg.folds, per_setting=False)[0]
        rows.append(Row(f"lambda_pc={fmt(lpc)};lambda_dpt={fmt(ldpt)}", variant, overall.values))
    return ExperimentReport("WEIGHT_SWEEP", rows, cfg.folds, cfg.to_json(), runner.cells)


def run_few_shot_eval(dataset: Dataset, cfg: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> ExperimentReport:
    """Rows per (LODO/SSDC, shots, variant); 0 shots reuses the base models untouched."""
    runner = runner or Runner(dataset, cfg, out_dir)
    rows = []
    for setting, cells in (("LODO", runner.lodo_cells(cfg.variants)), ("SSDC", runner.ssdc_cells(cfg.variants))):
        base = runner.run_cells(cells)
        for shots in cfg.shot_counts:
            if shots == 0:
                results = base
            else:
                results = runner.run_cells(cells, lambda c, s=shots, st=setting: _adapt_cell(runner, c, s, st))
            for r in _fold_rows(cells, results, cfg.folds, per_setting=False):
                rows.append(Row(setting, r.variant, r.values, f"shots={shots}"))
    return ExperimentReport("FEW_SHOT", rows, cfg.folds, cfg.to_json(), runner.cells)


def _adapt_cell(runner: Runner, cell: Cell, shots: int, setting: str) -> dict[str, EvalResult]:
    model = runner.model_for(cell)
    out = {}
    for region, ids in cell.eval_sets:
        pool = sorted(ids)
        k = shots
        if k > len(pool) - 1:
            warnings.warn(f"{region}: only {len(pool)} evaluation tiles; capping shots at {len(pool) - 1}", stacklevel=2)
            k = max(0, len(pool) - 1)
        perm = np.random.default_rng(derive_seed(runner.cfg.seed, "shots", region, cell.fold)).permutation(len(pool))
        shot_ids = [pool[i] for i in sorted(perm[:k])]
        eval_ids = [i for i in pool if i not in set(shot_ids)]
        runner.record_shot_cell(cell.setting, cell.variant, cell.fold, f"{setting};shots={shots};{region}",
                                set(cell.train_ids) | set(shot_ids), eval_ids)
        fsc = dataclasses.replace(runner.cfg.fewshot, shots=k, seed=derive_seed(runner.cfg.seed, "adapter", region, cell.fold))
        adapted = few_shot_finetune(model, [runner.by_id[i] for i in shot_ids], fsc, cell.train_cfg)
        out[region] = evaluate_model(adapted, [runner.by_id[i] for i in eval_ids], runner.tokens, runner.building_maps)
    return out


RUNNERS = {
    "FULL_SUP": run_full_supervision,
    "LODO": run_lodo,
    "SSDC": run_ssdc,
    "TRAIN_RATIO": run_train_ratio_sweep,
    "WEIGHT_SWEEP": run_weight_sweep,
    "FEW_SHOT": run_few_shot_eval,
}


def run_experiment(dataset: Dataset, cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> ExperimentReport:
    """Run ``cfg.protocol`` and, with ``out_dir``, write report files and checkpoints."""
    report = RUNNERS[cfg.protocol](dataset, cfg, out_dir)
    if out_dir is not None:
        report.write(out_dir)
    return report
