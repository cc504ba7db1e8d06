from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
import pytest

from damagelab.harness import (
    Cell,
    ExperimentConfig,
    ExperimentError,
    LeakageError,
    Runner,
    run_experiment,
    weight_grid,
)
from damagelab.presets import fewshot_config, train_config

# the tiny fixture has fewer damaged tokens than K, which warns by design
pytestmark = pytest.mark.filterwarnings("ignore:.*reducing K")

VARIANTS = ("FS", "PC")


def _cfg(protocol, **kw):
    base = dict(
        protocol=protocol, variants=VARIANTS, folds=2, seed=3, patch=4, dim=16, decoder_widths=(16, 8),
        train=train_config("desk", epochs=20, batch_size=2), fewshot=fewshot_config("desk", epochs=1),
        source_combos=(("Kah",), ("Kah", "Nur")), ratios=(0.5, 1.0), shot_counts=(0, 2), weights=(0.1, 0.01),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def reports(small_dataset):
    out = {}
    for protocol in ("LODO", "SSDC", "TRAIN_RATIO", "FEW_SHOT", "FULL_SUP"):
        out[protocol] = run_experiment(small_dataset, _cfg(protocol))
    return out


def _assert_no_leakage(report):
    assert report.cells
    for c in report.cells:
        assert c.train_ids.isdisjoint(c.eval_ids), (c.setting, c.variant, c.fold, c.extra)
        assert c.eval_ids


def test_no_protocol_trains_on_evaluated_tiles(reports):
    for rep in reports.values():
        _assert_no_leakage(rep)


def test_leakage_is_asserted_mechanically(small_dataset):
    runner = Runner(small_dataset, _cfg("LODO"))
    tid = small_dataset.tiles[0].tile_id
    cell = Cell("x", "FS", 0, "", (tid,), (("r", (tid,)),), runner.cfg.train)
    with pytest.raises(LeakageError, match="trained and evaluated"):
        runner.run_cell(cell)
    with pytest.raises(LeakageError, match="shot tiles"):
        runner.record_shot_cell("x", "FS", 0, "", {tid}, [tid])


def test_lodo_rows_cover_every_held_out_region(reports, small_dataset):
    rep = reports["LODO"]
    settings = {r.setting for r in rep.rows}
    assert settings == set(small_dataset.regions) | {"Overall"}
    for r in rep.rows:
        assert len(r.values["miou"]) == 2
        assert all(0.0 <= v <= 1.0 for v in r.values["miou"] + r.values["f1"])
    # Overall is the per-fold mean over held-out regions
    for v in VARIANTS:
        per_region = [rep.row(s, v).values["miou"] for s in small_dataset.regions]
        np.testing.assert_allclose(rep.row("Overall", v).values["miou"], np.mean(per_region, axis=0), atol=1e-15)


def test_lodo_cells_hold_out_the_whole_region(small_dataset):
    runner = Runner(small_dataset, _cfg("LODO"))
    for c in runner.lodo_cells(VARIANTS):
        train_regions = {runner.by_id[i].region for i in c.train_ids}
        assert c.setting not in train_regions
        assert [r for r, _ in c.eval_sets] == [c.setting]
        assert set(c.eval_sets[0][1]) == {t.tile_id for t in small_dataset.region_tiles(c.setting)}


def test_ssdc_evaluates_every_region_with_held_out_source_tiles(small_dataset):
    runner = Runner(small_dataset, _cfg("SSDC"))
    for c in runner.ssdc_cells(VARIANTS):
        assert [r for r, _ in c.eval_sets] == small_dataset.regions
        assert c.setting in ("Kah", "Kah+Nur")


def test_ratio_one_matches_ssdc_overall(reports):
    ratio, ssdc = reports["TRAIN_RATIO"], reports["SSDC"]
    for v in VARIANTS:
        assert ratio.row("ratio=1", v).values == ssdc.row("Overall", v).values
    for v in VARIANTS:
        assert ratio.row("ratio=0.5", v).values != ratio.row("ratio=1", v).values


def test_zero_shot_rows_equal_base_rows(reports):
    few, lodo, ssdc = reports["FEW_SHOT"], reports["LODO"], reports["SSDC"]
    for v in VARIANTS:
        assert few.row("LODO", v, "shots=0").values == lodo.row("Overall", v).values
        assert few.row("SSDC", v, "shots=0").values == ssdc.row("Overall", v).values
        assert few.row("LODO", v, "shots=2").values != lodo.row("Overall", v).values


def test_full_supervision_trains_and_tests_within_region(reports, small_dataset):
    rep = reports["FULL_SUP"]
    assert {r.setting for r in rep.rows} == set(small_dataset.regions) | {"Overall"}


def test_std_is_population_std_over_folds(reports):
    r = reports["LODO"].row("Overall", "PC")
    vals = r.values["miou"]
    assert r.std("miou") == pytest.approx(float(np.sqrt(np.mean((np.array(vals) - np.mean(vals)) ** 2))), abs=1e-15)


def test_csv_is_long_format(reports):
    rep = reports["FEW_SHOT"]
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert list(rows[0]) == ["protocol", "setting", "variant", "metric", "fold", "value"]
    assert len(rows) == len(rep.rows) * 2 * (2 + 2)
    assert {r["fold"] for r in rows} == {"0", "1", "mean", "std"}
    assert any(r["setting"] == "LODO;shots=2" for r in rows)


def test_weight_grid_layout():
    grid = weight_grid((0.1, 0.01, 0.001))
    assert len(grid) == 15
    assert grid[0] == ("PC", 0.1, 0.0) and grid[3] == ("DPT", 0.0, 0.1)
    assert ("PC+DPT", 0.01, 0.001) in grid


def test_weight_sweep_rows(small_dataset):
    rep = run_experiment(small_dataset, _cfg("WEIGHT_SWEEP", weights=(0.1,), train=train_config("desk", epochs=1)))
    assert [(r.variant, r.setting) for r in rep.rows] == [
        ("FS", "lambda_pc=0;lambda_dpt=0"),
        ("PC", "lambda_pc=0.1;lambda_dpt=0"),
        ("DPT", "lambda_pc=0;lambda_dpt=0.1"),
        ("PC+DPT", "lambda_pc=0.1;lambda_dpt=0.1"),
    ]
    _assert_no_leakage(rep)


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_reruns_are_byte_identical_across_thread_counts(tmp_path, small_dataset):
    a = tmp_path / "a"
    b = tmp_path / "b"
    run_experiment(small_dataset, _cfg("LODO", threads=1), a)
    run_experiment(small_dataset, _cfg("LODO", threads=3), b)
    ta, tb = _tree(a), _tree(b)
    assert ta.keys() == tb.keys()
    assert any(k.endswith(".ckpt") for k in ta)
    assert ta["report.csv"] == tb["report.csv"]
    for k in ta:
        if k.endswith(".ckpt"):
            assert ta[k] == tb[k], k


def test_config_validation(small_dataset):
    with pytest.raises(ExperimentError, match="protocol"):
        _cfg("NOPE")
    with pytest.raises(ExperimentError, match="variant"):
        _cfg("LODO", variants=("XX",))
    with pytest.raises(ExperimentError, match="folds"):
        _cfg("LODO", folds=1)
    with pytest.raises(ExperimentError, match="region"):
        run_experiment(small_dataset, _cfg("SSDC", source_combos=(("Atlantis",),)))
