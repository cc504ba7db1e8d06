"""``damagelab`` command line.

Settings are layered: preset defaults < JSON config file (``--config``) <
environment (``ST_SEED``, ``ST_THREADS``) < command-line flags. Unknown keys
in a config file are a usage error. Exit codes: 0 success, 1 runtime error,
2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .dataset import DatasetError, GeneratorConfig, default_regions, generate_dataset, load_dataset, region_table, save_dataset
from .decoder import DecoderParams
from .diffcore.checkpoint import CheckpointError
from .encoder import Encoder, PatchGeometry
from .harness import PROTOCOLS, ExperimentConfig, evaluate_model, run_experiment
from .metrics import building_decisions, fmt, report_from_counts
from .pnm import write_pgm
from .presets import PRESETS, preset
from .trainer import VARIANTS, FewShotConfig, Model, TrainConfig, train_fold, write_run_dir


class UsageError(Exception):
    pass


# key -> (type used for config-file values, help)
SETTINGS = {
    "preset": (str, "named defaults: " + ", ".join(PRESETS)),
    "seed": (int, "experiment seed"),
    "threads": (int, "worker threads (default: CPU count)"),
    "root": (str, "dataset directory to create"),
    "data": (str, "dataset directory"),
    "regions": (int, "number of default regions to generate"),
    "tiles_per_region": (int, "tiles per region"),
    "tile_size": (int, "tile edge in pixels"),
    "force": (bool, "overwrite an existing dataset directory"),
    "patch": (int, "encoder patch size P"),
    "dim": (int, "embedding dimension D"),
    "decoder_widths": (list, "decoder stage widths"),
    "encoder_seed": (int, "seed of the frozen projection"),
    "lr": (float, "learning rate"),
    "weight_decay": (float, "decoupled weight decay"),
    "epochs": (int, "training epochs"),
    "batch_size": (int, "tiles per batch"),
    "grad_clip": (float, "global gradient norm bound"),
    "lambda_pc": (float, "PC loss weight"),
    "lambda_dpt": (float, "DPT loss weight"),
    "train": (dict, "any other TrainConfig fields"),
    "fewshot": (dict, "FewShotConfig fields"),
    "run_dir": (str, "run directory"),
    "variant": (str, "training variant"),
    "train_regions": (list, "regions to train on"),
    "out": (str, "output directory"),
    "protocol": (str, "experiment protocol"),
    "variants": (list, "variants to run"),
    "combos": (list, "source combinations, e.g. Kah+Nur"),
    "ratios": (list, "train ratios"),
    "shots": (list, "shot counts"),
    "weights": (list, "loss-weight grid"),
    "folds": (int, "number of folds"),
    "checkpoint": (str, "model checkpoint"),
    "eval_regions": (list, "regions to evaluate"),
    "tiles": (list, "tile ids"),
}

COMMAND_DEFAULTS = {
    "seed": 0,
    "threads": os.cpu_count() or 1,
    "encoder_seed": 0,
    "force": False,
    "variant": "PC",
    "protocol": "LODO",
    "variants": ["FS", "PC"],
    "combos": None,
    "ratios": [0.2, 0.4, 0.6, 0.8, 1.0],
    "shots": [0, 1, 3, 5, 10],
    "weights": [0.1, 0.01, 0.001],
    "folds": 5,
    "train_regions": None,
    "eval_regions": None,
    "tiles": None,
}


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def _add_common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=None, help="JSON file with settings")
    p.add_argument("--preset", choices=sorted(PRESETS), default=S, help=SETTINGS["preset"][1])
    p.add_argument("--seed", type=int, default=S, help=SETTINGS["seed"][1])
    p.add_argument("--threads", type=int, default=S, help=SETTINGS["threads"][1])


def _add_model(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--patch", type=int, default=S)
    p.add_argument("--dim", type=int, default=S)
    p.add_argument("--decoder-widths", dest="decoder_widths", type=_csv_list(int), default=S)
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int, default=S)


def _add_train(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=S)
    p.add_argument("--lambda-pc", dest="lambda_pc", type=float, default=S)
    p.add_argument("--lambda-dpt", dest="lambda_dpt", type=float, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="damagelab", description="Cross-region building-damage segmentation lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--root", default=S, required=False)
    p.add_argument("--regions", type=int, default=S)
    p.add_argument("--tiles-per-region", dest="tiles_per_region", type=int, default=S)
    p.add_argument("--tile-size", dest="tile_size", type=int, default=S)
    p.add_argument("--force", action="store_true", default=S)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--data", default=S)
    p.add_argument("--run-dir", dest="run_dir", default=S)
    p.add_argument("--variant", choices=VARIANTS, default=S)
    p.add_argument("--train-regions", dest="train_regions", type=_csv_list(str), default=S)

    p = sub.add_parser("experiment", help="run an experiment protocol")
    _add_common(p)
    _add_model(p)
    _add_train(p)
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--protocol", type=str.upper, choices=PROTOCOLS, default=S)
    p.add_argument("--variants", type=_csv_list(str.upper), default=S)
    p.add_argument("--combos", type=_csv_list(str), default=S, help="e.g. Kah,Nur,Kah+Nur")
    p.add_argument("--ratios", type=_csv_list(float), default=S)
    p.add_argument("--shots", type=_csv_list(int), default=S)
    p.add_argument("--weights", type=_csv_list(float), default=S)
    p.add_argument("--folds", type=int, default=S)

    p = sub.add_parser("eval", help="evaluate a checkpoint on dataset regions")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--eval-regions", dest="eval_regions", type=_csv_list(str), default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("infer-map", help="write probability maps, masks and building decisions")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--tiles", type=_csv_list(str), default=S)
    p.add_argument("--dim", type=int, default=S, help="expected embedding dimension (checked against the checkpoint)")
    p.add_argument("--out", default=S)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _add_common(p)
    return parser


# -- configuration ---------------------------------------------------------------------


def _check_type(key: str, value):
    kind = SETTINGS[key][0]
    ok = {
        int: lambda v: isinstance(v, int) and not isinstance(v, bool),
        float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        str: lambda v: isinstance(v, str),
        bool: lambda v: isinstance(v, bool),
        list: lambda v: v is None or isinstance(v, list),
        dict: lambda v: isinstance(v, dict),
    }[kind](value)
    if not ok:
        raise UsageError(f"config key {key!r} must be of type {kind.__name__}, got {value!r}")
    return float(value) if kind is float else value


def resolve(args: argparse.Namespace, environ=os.environ) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{path}: top level must be an object")
        unknown = sorted(set(file_cfg) - set(SETTINGS))
        if unknown:
            raise UsageError(f"{path}: unknown config keys: {', '.join(unknown)}")
        file_cfg = {k: _check_type(k, v) for k, v in file_cfg.items()}
    name = flags.get("preset") or file_cfg.get("preset") or "desk"
    try:
        cfg = {**COMMAND_DEFAULTS, **preset(name), "preset": name}
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    for key in ("train", "fewshot"):
        cfg[key] = {**cfg[key], **file_cfg.pop(key, {})}
    cfg.update(file_cfg)
    for env, key in (("ST_SEED", "seed"), ("ST_THREADS", "threads")):
        if env in environ:
            try:
                cfg[key] = int(environ[env])
            except ValueError:
                raise UsageError(f"{env} must be an integer, got {environ[env]!r}") from None
    cfg.update(flags)
    if cfg["threads"] < 1:
        raise UsageError(f"threads must be >= 1, got {cfg['threads']}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    fields = dict(cfg["train"])
    for key in ("lr", "weight_decay", "epochs", "batch_size", "grad_clip", "lambda_pc", "lambda_dpt"):
        if key in cfg:
            fields[key] = cfg[key]
    fields["seed"] = cfg["seed"]
    try:
        return TrainConfig.from_json(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"train config: {exc}") from None


def fewshot_config(cfg: dict) -> FewShotConfig:
    try:
        return FewShotConfig(**cfg["fewshot"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"fewshot config: {exc}") from None


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _load(cfg: dict):
    _require(cfg, "data")
    root = Path(cfg["data"])
    if not (root / "manifest.json").exists():
        raise UsageError(f"dataset not found: {root} (no manifest.json)")
    return load_dataset(root, cfg["threads"])


def _echo_config(cfg: dict, directory: Path, extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    doc = {k: v for k, v in cfg.items()}
    if extra:
        doc.update(extra)
    (directory / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _encoder(cfg: dict, dataset) -> tuple[Encoder, DecoderParams]:
    H, W, C = dataset.tiles[0].image.shape
    try:
        geometry = PatchGeometry(H, W, C, cfg["patch"])
        spec = DecoderParams.for_patch(cfg["dim"], cfg["patch"], tuple(cfg["decoder_widths"]) if cfg["decoder_widths"] else None)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return Encoder.create(geometry, cfg["dim"], cfg["encoder_seed"]), spec


# -- commands ----------------------------------------------------------------------------


def cmd_gen(cfg: dict) -> int:
    _require(cfg, "root")
    if cfg["regions"] < 1:
        raise UsageError(f"--regions must be at least 1, got {cfg['regions']}")
    if cfg["tiles_per_region"] < 1:
        raise UsageError(f"--tiles-per-region must be at least 1, got {cfg['tiles_per_region']}")
    root = Path(cfg["root"])
    if root.exists() and any(root.iterdir()):
        if not cfg["force"]:
            raise UsageError(f"{root} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(root / "tiles", ignore_errors=True)
        (root / "manifest.json").unlink(missing_ok=True)
    try:
        specs = default_regions(cfg["regions"], cfg["tiles_per_region"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = generate_dataset(specs, cfg["seed"], GeneratorConfig(tile_size=cfg["tile_size"]), cfg["threads"])
    save_dataset(data, root)
    print(f"{'region':<16}{'tiles':>7}{'buildings':>11}{'damaged':>9}")
    for row in region_table(data):
        print(f"{row['region']:<16}{row['tiles']:>7}{row['buildings']:>11}{row['damaged_buildings']:>9}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "run_dir")
    data = _load(cfg)
    regions = cfg["train_regions"] or data.regions
    for r in regions:
        if r not in data.regions:
            raise UsageError(f"unknown region {r!r}")
    tiles = [t for r in regions for t in data.region_tiles(r)]
    enc, spec = _encoder(cfg, data)
    tc = train_config(cfg)
    result = train_fold(tiles, tc, cfg["variant"], encoder=enc, decoder_spec=spec)
    run_dir = Path(cfg["run_dir"])
    write_run_dir(run_dir, result, tc.for_variant(cfg["variant"]), cfg["variant"])
    resolved = json.loads((run_dir / "config.json").read_text())
    _echo_config(cfg, run_dir, {"resolved_train": resolved["train"], "train_ids": resolved["train_ids"]})
    last = result.trace[-1]
    print(f"trained {cfg['variant']} on {len(tiles)} tiles; final L_ST {fmt(last.total)}; run dir {run_dir}")
    return 0


def _combos(raw):
    if raw is None:
        return None
    return tuple(tuple(part for part in c.split("+") if part) for c in raw)


def cmd_experiment(cfg: dict) -> int:
    _require(cfg, "out")
    data = _load(cfg)
    try:
        ecfg = ExperimentConfig(
            protocol=cfg["protocol"].upper(),
            variants=tuple(v.upper() for v in cfg["variants"]),
            source_combos=_combos(cfg["combos"]),
            ratios=tuple(cfg["ratios"]),
            shot_counts=tuple(cfg["shots"]),
            weights=tuple(cfg["weights"]),
            folds=cfg["folds"],
            seed=cfg["seed"],
            patch=cfg["patch"],
            dim=cfg["dim"],
            decoder_widths=tuple(cfg["decoder_widths"]) if cfg["decoder_widths"] else None,
            encoder_seed=cfg["encoder_seed"],
            train=train_config(cfg),
            fewshot=fewshot_config(cfg),
            threads=cfg["threads"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    # thread count must not influence any written byte, so it is not echoed
    _echo_config({k: v for k, v in cfg.items() if k != "threads"}, out)
    report = run_experiment(data, ecfg, out)
    sys.stdout.write(report.to_markdown())
    return 0


def _load_model(cfg: dict) -> Model:
    _require(cfg, "checkpoint")
    path = Path(cfg["checkpoint"])
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    return Model.load(path)


def cmd_eval(cfg: dict) -> int:
    data = _load(cfg)
    model = _load_model(cfg)
    regions = cfg["eval_regions"] or data.regions
    rows = {}
    for r in regions:
        if r not in data.regions:
            raise UsageError(f"unknown region {r!r}")
        res = evaluate_model(model, data.region_tiles(r))
        rows[r] = {"pixel": report_from_counts(res.pixels).to_dict(), "building": report_from_counts(res.buildings).to_dict()}
        print(f"{r:<16} mIoU {res.miou:.4f}  F1 {res.f1:.4f}")
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_infer_map(cfg: dict) -> int:
    _require(cfg, "out")
    data = _load(cfg)
    model = _load_model(cfg)
    if cfg.get("dim") is not None and cfg["dim"] != model.D:
        raise UsageError(f"embedding dimension mismatch: checkpoint has D={model.D}, configuration says D={cfg['dim']}")
    H, W, C = data.tiles[0].image.shape
    g = model.geometry
    if (H, W, C) != (g.H, g.W, g.C):
        raise UsageError(f"checkpoint geometry {g.H}x{g.W}x{g.C} does not match dataset tiles {H}x{W}x{C}")
    by_id = {t.tile_id: t for t in data.tiles}
    ids = cfg["tiles"] or [t.tile_id for t in data.tiles]
    for tid in ids:
        if tid not in by_id:
            raise UsageError(f"unknown tile {tid!r}")
    out = Path(cfg["out"])
    for tid in ids:
        tile = by_id[tid]
        p = model.predict([tile.image])[0].astype(np.float64)
        q = np.round(p * 65535).astype(np.int64)
        d = out / tid
        d.mkdir(parents=True, exist_ok=True)
        write_pgm(d / "prob.pgm", q, 65535)
        write_pgm(d / "mask.pgm", (p >= 0.5).astype(np.uint8), 1)
        decisions = building_decisions(p, tile.damage_mask, tile.building_ids())
        payload = {
            str(b.building_id): {"predicted_damaged": b.predicted_damaged, "positive_fraction": b.positive_fraction}
            for b in decisions
        }
        (d / "buildings.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote maps for {len(ids)} tiles to {out}")
    return 0


def cmd_grad_check(cfg: dict) -> int:
    from .gradsuite import run_all

    results = run_all(cfg["seed"])
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<28} max rel err {r.report.max_rel_error:.3e}  (tol {r.report.tolerance:g}, n={r.report.n_checked})")
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "eval": cmd_eval,
    "infer-map": cmd_infer_map,
    "grad-check": cmd_grad_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"damagelab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError) as exc:
        print(f"damagelab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        print(f"damagelab {args.command}: error: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
