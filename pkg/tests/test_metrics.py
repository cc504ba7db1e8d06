from __future__ import annotations

import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from damagelab.dataset import rasterize_footprints
from damagelab.metrics import (
    ConfusionCounts,
    building_counts,
    building_decisions,
    building_level_metrics,
    fmt,
    pixel_metrics,
    report_from_counts,
    reports_to_csv,
    reports_to_json,
)

FIELDS = ("precision", "recall", "f1", "iou0", "iou1", "miou", "accuracy")


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 0.1, 0.5, 0.9, 1.0]), st.sampled_from([0.0, 0.2, 0.5, 1.0]))
def test_pixel_metrics_match_oracle(seed, p_rate, g_rate):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 9, size=2))
    pred = rng.random(shape) < p_rate
    gt = rng.random(shape) < g_rate
    rep = pixel_metrics(pred, gt)
    counts = oracles.confusion(pred, gt)
    assert ConfusionCounts.from_masks(pred, gt) == ConfusionCounts(*counts)
    ref = oracles.scores(*counts)
    for f in FIELDS:
        assert abs(getattr(rep, f) - ref[f]) <= 1e-10, f
    assert rep.n_pixels == pred.size


def test_empty_class_convention():
    # damage absent in prediction and truth: IoU1 = 1, so mIoU = 1 on perfect background
    r = pixel_metrics(np.zeros((3, 3)), np.zeros((3, 3)))
    assert (r.iou1, r.iou0, r.miou, r.f1, r.precision, r.recall) == (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    # damage present only in truth: undefined precision is 0, not NaN
    gt = np.zeros((2, 2))
    gt[0, 0] = 1
    r = pixel_metrics(np.zeros((2, 2)), gt)
    assert r.precision == 0.0 and r.recall == 0.0 and r.f1 == 0.0 and r.iou1 == 0.0
    assert r.iou0 == 0.75
    assert not report_from_counts(ConfusionCounts()).defined


def test_threshold_is_inclusive():
    d = building_decisions(np.array([[0.5, 0.4]]), np.array([[1, 1]]), np.array([[1, 1]]))
    assert d[0].positive_fraction == 0.5 and d[0].predicted_damaged


def _random_buildings(rng, H, W):
    polys = []
    for _ in range(rng.integers(0, 5)):
        x0, y0 = rng.integers(0, W - 1), rng.integers(0, H - 1)
        x1, y1 = rng.integers(x0 + 1, W + 1), rng.integers(y0 + 1, H + 1)
        polys.append([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    return rasterize_footprints(polys, H, W).ids


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31))
def test_building_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(2, 12, size=2)
    ids = _random_buildings(rng, H, W)
    prob = rng.random((H, W))
    gt = rng.random((H, W)) < rng.choice([0.1, 0.5, 0.9])
    got = {d.building_id: d for d in building_decisions(prob, gt, ids)}
    ref = oracles.buildings(prob, gt, ids)
    assert set(got) == set(ref)
    for b, (pred, truth, frac) in ref.items():
        assert got[b].predicted_damaged == pred and got[b].gt_damaged == truth
        assert abs(got[b].positive_fraction - frac) <= 1e-10
    counts = oracles.confusion([ref[b][0] for b in sorted(ref)], [ref[b][1] for b in sorted(ref)])
    assert building_counts(got.values()) == ConfusionCounts(*counts)
    rep = building_level_metrics(prob, gt, ids)
    expected = oracles.scores(*counts)
    for f in FIELDS:
        assert abs(getattr(rep, f) - expected[f]) <= 1e-10
    assert rep.n_buildings == len(ref)


def test_building_decision_shape_checks():
    with pytest.raises(ValueError, match="shape"):
        building_decisions(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3), int))
    with pytest.raises(ValueError, match="non-negative"):
        building_decisions(np.zeros((1, 1)), np.zeros((1, 1)), -np.ones((1, 1), int))


def test_confusion_counts_add():
    a, b = ConfusionCounts(1, 2, 3, 4), ConfusionCounts(4, 3, 2, 1)
    assert a + b == ConfusionCounts(5, 5, 5, 5)
    assert (a + b).total == 20


def test_emission_round_trips():
    rep = pixel_metrics(np.eye(3), np.ones((3, 3)))
    text = reports_to_csv([("x", rep)])
    rows = list(csv.DictReader(io.StringIO(text)))
    assert float(rows[0]["miou"]) == float(fmt(rep.miou))
    assert json.loads(reports_to_json([("x", rep)]))["x"]["f1"] == pytest.approx(rep.f1)
    assert fmt(1 / 3) == "0.333333333333"
    assert fmt(0.5) == "0.5"
