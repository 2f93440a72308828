import csv
import hashlib
import json
from datetime import timedelta

import pytest
import yaml

from glucofde.cli import main
from glucofde.data import read_segments
from glucofde.expression import parse_expression, to_string
from glucofde.variables import MEAL_INDEX

SMALL = {
    "synthetic": {"participants": 2, "days": 3, "noise_sigma": 2.0},
    "clustering": {"k": 2, "restarts": 3, "elbow_ks": [2, 3]},
    "evolution": {"population_size": 20, "generations": 3, "runs": 2},
}


def _config(tmp_path, **extra):
    doc = json.loads(json.dumps(SMALL))
    doc["paths"] = {"out": str(tmp_path / "run")}
    for section, values in extra.items():
        doc.setdefault(section, {}).update(values)
    p = tmp_path / "config.yaml"
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    assert main(["all", "--config", cfg]) == 0
    return tmp, cfg


def test_all_stages_write_their_artifacts(pipeline):
    tmp, _ = pipeline
    out = tmp / "run"
    for name in ("raw/data.csv", "raw/ground_truth.json", "segments.json", "rejections.csv", "clusters.json",
                 "cluster_model.json", "elbow.csv", "splits.json", "models/index.json", "evaluation.json",
                 "predictions.csv", "report/mrmse.csv", "report/peg_zones.csv", "report/peg_horizons.csv",
                 "report/report.json", "report/expressions.txt", "report/horizons_isige.svg"):
        assert (out / name).exists(), name
    doc = json.loads((out / "evaluation.json").read_text())
    assert set(doc["meta"]) == {"config_hash", "seed", "schema_version"}
    assert (out / "report/mrmse.csv").read_text().startswith("# config_hash=")


def test_expressions_match_model_files(pipeline):
    tmp, _ = pipeline
    out = tmp / "run"
    lines = [ln for ln in (out / "report/expressions.txt").read_text().splitlines() if not ln.startswith("#")]
    assert lines
    for line in lines:
        cluster, method, text = line.split("\t")
        if method == "mean":
            continue
        model = json.loads((out / "models" / f"cluster_{cluster.split()[-1]}_{method}.json").read_text())
        assert model["model"]["expression"] == text
        assert to_string(parse_expression(text)) == text


def test_evaluate_before_train_names_the_missing_stage(tmp_path, capsys):
    cfg = _config(tmp_path)
    for stage in ("gen-data", "preprocess", "cluster", "split"):
        assert main([stage, "--config", cfg]) == 0
    assert main(["evaluate", "--config", cfg]) == 4
    assert "train" in capsys.readouterr().err


def test_preprocess_without_raw_data(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert main(["preprocess", "--config", cfg]) == 4
    assert "gen-data" in capsys.readouterr().err
    cfg = _config(tmp_path, paths={"out": str(tmp_path / "run"), "raw": str(tmp_path / "missing.csv")})
    assert main(["preprocess", "--config", cfg]) == 3


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("evolution:\n  crossover_rate: 3\n")
    assert main(["gen-data", "--config", str(p)]) == 2
    p.write_text("unknown_section: 1\n")
    assert main(["gen-data", "--config", str(p)]) == 2
    assert main(["train", "--method", "lasso", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["no-such-stage"])
    assert exc.value.code == 2


def test_missing_grammar_file_exits_2(tmp_path):
    assert main(["gen-data", "--grammar", str(tmp_path / "none.bnf"), "--out", str(tmp_path)]) == 0
    cfg = _config(tmp_path, paths={"out": str(tmp_path / "run"), "grammar": str(tmp_path / "none.bnf")})
    for stage in ("gen-data", "preprocess", "cluster", "split"):
        main([stage, "--config", cfg])
    assert main(["train", "--config", cfg, "--method", "isige"]) == 2


def test_planted_jump_is_rejected(tmp_path):
    cfg = _config(tmp_path)
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["preprocess", "--config", cfg]) == 0
    out = tmp_path / "run"
    target = read_segments(out / "segments.json")[0]
    jump_at = (target.meal_time + 3 * timedelta(minutes=15)).isoformat()

    path = out / "raw" / "data.csv"
    lines = path.read_text().splitlines(keepends=True)
    header = [ln for ln in lines if ln.startswith("#")]
    rows = list(csv.reader(ln for ln in lines if not ln.startswith("#")))
    g = rows[0].index("G")
    hits = 0
    for row in rows[1:]:
        if row[0] == target.participant and row[1].startswith(jump_at[:16]):
            row[g] = repr(float(row[g]) * 1.6)
            hits += 1
    assert hits == 1
    with open(path, "w", newline="") as fh:
        fh.writelines(header)
        csv.writer(fh, lineterminator="\n").writerows(rows)

    assert main(["preprocess", "--config", cfg]) == 0
    rejected = list(csv.DictReader(ln for ln in open(out / "rejections.csv") if not ln.startswith("#")))
    assert any(r["segment_id"] == target.id and r["constraint"] == "3" for r in rejected)
    assert target.id not in [s.id for s in read_segments(out / "segments.json")]


def test_training_never_reads_test_segments(tmp_path):
    cfg = _config(tmp_path)
    for stage in ("gen-data", "preprocess", "cluster", "split", "train"):
        assert main([stage, "--config", cfg]) == 0
    out = tmp_path / "run"
    models = sorted((out / "models").glob("*.json"))
    before = {p.name: _digest(p) for p in models}

    splits = json.loads((out / "splits.json").read_text())["clusters"]
    test_ids = {i for s in splits.values() for i in s["test"]}
    doc = json.loads((out / "segments.json").read_text())
    touched = 0
    for seg in doc["segments"]:
        if seg["id"] in test_ids:
            for row in seg["samples"][MEAL_INDEX + 1:]:
                row[0] += 50.0
            touched += 1
    assert touched
    (out / "segments.json").write_text(json.dumps(doc))

    assert main(["train", "--config", cfg]) == 0
    assert {p.name: _digest(p) for p in sorted((out / "models").glob("*.json"))} == before


def test_rerunning_a_stage_is_idempotent(pipeline):
    tmp, cfg = pipeline
    out = tmp / "run"
    files = ["splits.json", "clusters.json", "report/mrmse.csv"]
    before = {f: _digest(out / f) for f in files}
    for stage in ("cluster", "split", "report"):
        assert main([stage, "--config", cfg]) == 0
    assert {f: _digest(out / f) for f in files} == before


def test_method_subset(tmp_path):
    cfg = _config(tmp_path)
    assert main(["all", "--config", cfg, "--method", "mean,sindy"]) == 0
    index = json.loads((tmp_path / "run" / "models" / "index.json").read_text())
    for entry in index["clusters"].values():
        assert set(entry["methods"]) <= {"mean", "sindy"}
