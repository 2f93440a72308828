import csv
import math
from datetime import datetime

import numpy as np
import pytest
from shapely.geometry import Point, box

from glucofde.data import STEP, Segment
from glucofde.errors import DomainError, SchemaError
from glucofde.evaluate import (ZONES, PredictionRecord, default_grid, evaluate_cluster, load_peg_grid,
                               mean_baseline, mrmse, peg_classify, peg_report, read_predictions_csv,
                               write_horizons_csv, write_mrmse_csv, write_predictions_csv, write_zones_csv,
                               zone_for)
from glucofde.expression import parse_expression
from glucofde.fde import FdeModel
from glucofde.variables import MEAL_INDEX, SEGMENT_LENGTH


def _segment(i, g_post):
    s = np.ones((SEGMENT_LENGTH, 7))
    s[:, 0] = 120.0
    s[MEAL_INDEX + 1:, 0] = g_post
    return Segment(f"P01-{i:04d}", "P01", datetime(2024, 1, 1) + i * STEP, s, 1)


def test_zone_polygons_tile_the_domain():
    grid = default_grid()
    polys = grid.zone_polygons()
    domain = box(0, 0, 550, 550)
    assert sum(p.area for p in polys.values()) == pytest.approx(domain.area, rel=1e-9)
    for a in ZONES:
        for b in ZONES:
            if a < b:
                assert polys[a].intersection(polys[b]).area == pytest.approx(0.0, abs=1e-6)
    pts = np.random.default_rng(0).uniform(0, 550, size=(10_000, 2))
    for x, y in pts:
        inside = [z for z, p in polys.items() if p.covers(Point(x, y))]
        assert len(inside) >= 1
        assert peg_classify(x, y) == inside[0]


def test_diagonal_is_zone_a():
    for r in np.linspace(0, 550, 100):
        assert peg_classify(r, r) == "A"


def test_far_errors_land_in_high_risk_zones():
    assert peg_classify(20, 500) == "E"
    assert peg_classify(300, 30) in ("D", "E")


def test_out_of_range_pairs():
    with pytest.raises(DomainError):
        peg_classify(-1, 100)
    with pytest.raises(DomainError):
        peg_classify(float("nan"), 100)
    assert peg_classify(700, 700) == "A"  # clamped to the grid edge


def test_zone_for_failed_and_negative_predictions():
    assert zone_for(120.0, float("nan")) == "E"
    assert zone_for(120.0, float("inf")) == "E"
    assert zone_for(10.0, -5.0) == peg_classify(10.0, 0.0)


def test_grid_file_validation(tmp_path):
    p = tmp_path / "grid.json"
    p.write_text('{"domain": [0, 550], "regions": [{"zone": "B", "polygon": [[0,0],[1,0],[1,1]]}]}')
    with pytest.raises(SchemaError):
        load_peg_grid(p)
    p.write_text('{"regions": []}')
    with pytest.raises(SchemaError):
        load_peg_grid(p)


def test_mean_baseline_ignores_the_segment():
    train = [_segment(0, 100.0), _segment(1, 200.0)]
    model = mean_baseline(train)
    assert model.baseline == (150.0,) * 8
    assert mrmse(model, [_segment(2, 150.0)]) == 0.0
    assert mrmse(model, [_segment(3, 160.0)]) == pytest.approx(10.0)
    with pytest.raises(DomainError):
        mean_baseline([])


def _records(models, segs):
    recs, scores = evaluate_cluster(models, segs, cluster=1)
    return recs, scores


def test_perfect_predictor_is_all_zone_a():
    segs = [_segment(i, 120.0) for i in range(5)]
    recs, scores = _records({"sindy": FdeModel("sindy", expr=parse_expression("G"))}, segs)
    rep = peg_report(recs, mrmse_values={(1, "sindy"): scores["sindy"]})
    assert rep.zones[(1, "sindy")]["A"] == 100.0
    assert scores["sindy"] == 0.0
    assert rep.horizons[("sindy", 8)]["A+B"] == 100.0


def test_report_rows_sum_to_100():
    rng = np.random.default_rng(1)
    recs = [PredictionRecord(c, m, f"s{i}", h, float(rng.uniform(20, 500)), float(rng.uniform(0, 550)))
            for c in (1, 2) for m in ("mean", "isige") for i in range(7) for h in range(1, 9)]
    rep = peg_report(recs)
    for row in rep.zones.values():
        assert sum(row.values()) == pytest.approx(100.0, abs=0.1)
    for row in rep.horizons.values():
        assert sum(row.values()) == pytest.approx(100.0, abs=0.1)
    assert rep.methods == ["mean", "isige"]
    assert rep.segments == {1: 7, 2: 7}


def test_failed_model_counts_as_zone_e():
    segs = [_segment(i, 120.0) for i in range(2)]
    recs, scores = _records({"isige": FdeModel("isige", expr=parse_expression("G + pow(G, 9)"))}, segs)
    assert {r.zone for r in recs} == {"E"}
    assert scores["isige"] >= 1e8


def test_csv_writers(tmp_path):
    segs = [_segment(i, 130.0 + i) for i in range(3)]
    models = {"mean": mean_baseline(segs), "sindy": FdeModel("sindy", expr=parse_expression("G + 1"))}
    recs, scores = _records(models, segs)
    rep = peg_report(recs, mrmse_values={(1, m): v for m, v in scores.items()})
    write_mrmse_csv(tmp_path / "m.csv", rep)
    write_zones_csv(tmp_path / "z.csv", rep)
    write_horizons_csv(tmp_path / "h.csv", rep)
    write_predictions_csv(tmp_path / "p.csv", recs)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["cluster", "segments", "mean", "sindy"]
    assert rows[1][:2] == ["1", "3"] and rows[-1][0] == "mean"
    z = list(csv.reader(open(tmp_path / "z.csv")))
    assert len(z[0]) == 2 + 2 * len(ZONES)
    h = list(csv.reader(open(tmp_path / "h.csv")))
    assert h[1][:2] == ["mean", "15"] and len(h) == 1 + 16
    back = read_predictions_csv(tmp_path / "p.csv")
    assert [(r.segment_id, r.horizon, r.prediction) for r in back] == \
        [(r.segment_id, r.horizon, r.prediction) for r in recs]


def test_predictions_keep_full_precision(tmp_path):
    r = PredictionRecord(1, "sindy", "s", 1, 1 / 3, math.pi, "A")
    write_predictions_csv(tmp_path / "p.csv", [r])
    assert read_predictions_csv(tmp_path / "p.csv")[0].prediction == math.pi
