"""Command line pipeline: synthetic data, preprocessing, clustering, splits, training, evaluation, reports."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import evaluate as ev
from .cluster import elbow_scan, kmeans, pre_meal_vector
from .config import PipelineConfig
from .data import (Segment, Split, generate_synthetic, load_raw_csv, read_segments, split_cluster,
                   write_raw_csv, write_segments)
from .errors import (ConfigError, DataError, DependencyError, DomainError, GlucoFdeError, GrammarError,
                     NumericalError, SchemaError)
from .evolve import train_isige, validation_scores
from .fde import FdeModel
from .grammar import default_grammar, load_grammar
from .preprocess import preprocess_all
from .sindy import fit_sindy

log = logging.getLogger("glucofde")

SCHEMA_VERSION = 1
COMMANDS = ("gen-data", "preprocess", "cluster", "split", "train", "evaluate", "report")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEPENDENCY = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# artifact helpers


def meta(cfg):
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "schema_version": SCHEMA_VERSION}


def _path(cfg, *parts):
    return os.path.join(cfg.out, *parts)


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from None


def write_json(path, body, cfg):
    _ensure_dir(os.path.dirname(path) or ".")
    doc = {"meta": meta(cfg), **body}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path, command):
    if not os.path.exists(path):
        raise DependencyError(f"{path} not found; run `{command}` first", command)
    with open(path) as fh:
        return json.load(fh)


def header_line(cfg):
    m = meta(cfg)
    return "# " + " ".join(f"{k}={m[k]}" for k in sorted(m)) + "\n"


def prepend_header(path, cfg):
    with open(path) as fh:
        body = fh.read()
    with open(path, "w") as fh:
        fh.write(header_line(cfg) + body)


def write_csv(path, header, rows, cfg):
    _ensure_dir(os.path.dirname(path) or ".")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w") as fh:
        fh.write(header_line(cfg) + buf.getvalue())


def _load_segments(cfg):
    path = _path(cfg, "segments.json")
    if not os.path.exists(path):
        raise DependencyError(f"{path} not found; run `preprocess` first", "preprocess")
    return read_segments(path)


def _clustered_segments(cfg):
    segments = _load_segments(cfg)
    doc = read_json(_path(cfg, "clusters.json"), "cluster")
    labels = doc["assignments"]
    out = []
    for s in segments:
        if s.id not in labels:
            raise DependencyError(f"segment {s.id} has no cluster; rerun `cluster`", "cluster")
        out.append(Segment(s.id, s.participant, s.meal_time, s.samples, labels[s.id], s.gap_flags))
    return out


def _splits(cfg):
    doc = read_json(_path(cfg, "splits.json"), "split")
    return {int(c): Split.from_json(s) for c, s in doc["clusters"].items()}


def _grammar(cfg):
    return load_grammar(cfg.grammar_path) if cfg.grammar_path else default_grammar()


def _cluster_seed(seed, cluster):
    return int(np.random.SeedSequence([seed, cluster]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg):
    syn = cfg.synthetic()
    series, truth = generate_synthetic(syn, cfg.section_seed("synthetic"))
    raw_dir = _path(cfg, "raw")
    _ensure_dir(raw_dir)
    path = os.path.join(raw_dir, "data.csv")
    write_raw_csv(path, series)
    prepend_header(path, cfg)
    write_json(os.path.join(raw_dir, "ground_truth.json"), {"model": truth.to_json()}, cfg)
    log.info("wrote %d participants to %s", len(series), path)


def cmd_preprocess(cfg):
    path = cfg.raw_path
    if path is None:
        path = _path(cfg, "raw", "data.csv")
        if not os.path.exists(path):
            raise DependencyError(f"{path} not found; run `gen-data` first or set paths.raw", "gen-data")
    elif not os.path.exists(path):
        raise DataError(f"raw data file {path} does not exist")
    series = load_raw_csv(path)
    segments, rejections = preprocess_all(series, cfg.preprocess())
    _ensure_dir(cfg.out)
    write_segments(_path(cfg, "segments.json"), segments, meta(cfg))
    write_csv(_path(cfg, "rejections.csv"), ["segment_id", "constraint", "detail"],
              [[r["segment_id"], r["constraint"], r["detail"]] for r in rejections], cfg)
    log.info("%d segments kept, %d rejected", len(segments), len(rejections))


def cmd_cluster(cfg):
    segments = _load_segments(cfg)
    params = cfg.clustering()
    k = params["k"]
    if len(segments) < k:
        raise DataError(f"{len(segments)} segments cannot form {k} clusters")
    x = np.stack([pre_meal_vector(s) for s in segments])
    model, labels = kmeans(x, k, params["restarts"], params["seed"], params["max_iter"])
    assignments = {s.id: int(c) + 1 for s, c in zip(segments, labels)}
    sizes = {str(c + 1): int(np.sum(labels == c)) for c in range(k)}
    write_json(_path(cfg, "clusters.json"), {"assignments": assignments, "sizes": sizes}, cfg)
    write_json(_path(cfg, "cluster_model.json"), {"model": model.to_json()}, cfg)
    ks = [kk for kk in params["elbow_ks"] if kk <= len(segments)]
    rows = elbow_scan(x, ks, params["restarts"], params["seed"], params["max_iter"]) if ks else []
    write_csv(_path(cfg, "elbow.csv"), ["k", "intra_distance"], [[kk, repr(d)] for kk, d in rows], cfg)
    log.info("clustered %d segments into %d groups", len(segments), k)


def cmd_split(cfg):
    segments = _clustered_segments(cfg)
    seed = cfg.section_seed("split")
    by_cluster = {}
    for s in segments:
        by_cluster.setdefault(s.cluster_id, []).append(s)
    splits = {str(c): split_cluster(segs, seed, c).to_json() for c, segs in sorted(by_cluster.items())}
    write_json(_path(cfg, "splits.json"), {"clusters": splits}, cfg)


def _model_path(cfg, cluster, method):
    return _path(cfg, "models", f"cluster_{cluster}_{method}.json")


def cmd_train(cfg):
    segments = {s.id: s for s in _clustered_segments(cfg)}
    splits = _splits(cfg)
    methods = cfg.methods
    evo = cfg.evolution()
    sindy = cfg.sindy()
    grammar = _grammar(cfg) if "isige" in methods else None
    index = {}
    for c, sp in sorted(splits.items()):
        train = [segments[i] for i in sp.train]
        val = [segments[i] for i in sp.validation]
        entry = index.setdefault(str(c), {"methods": [], "skipped": {}})
        if not train or not val:
            for m in methods:
                entry["skipped"][m] = "too few segments for training and validation"
            log.warning("cluster %d: too few segments, skipped", c)
            continue
        for m in methods:
            try:
                model = _train_one(cfg, m, c, train, val, evo, sindy, grammar)
            except NumericalError as exc:
                entry["skipped"][m] = str(exc)
                log.warning("cluster %d %s: %s", c, m, exc)
                continue
            write_json(_model_path(cfg, c, m), {"cluster": c, "method": m, "model": model.to_json()}, cfg)
            entry["methods"].append(m)
        log.info("cluster %d trained: %s", c, ", ".join(entry["methods"]) or "nothing")
    write_json(_path(cfg, "models", "index.json"), {"clusters": index}, cfg)


def _train_one(cfg, method, cluster, train, val, evo, sindy, grammar):
    if method == "mean":
        return ev.mean_baseline(train)
    if method == "sindy":
        return fit_sindy(train, sindy["spec"], sindy["lambda"], sindy["max_iters"], sindy["ridge"],
                         sindy["standardize"])
    seed = _cluster_seed(evo.seed, cluster)
    chosen, results = train_isige(train, val, evo, seed, cfg.threads, grammar)
    scores = validation_scores([r.model for r in results], val)
    runs = []
    for r, score in zip(results, scores):
        run = r.model.metadata["run"]
        write_csv(_path(cfg, "models", "runs", f"cluster_{cluster}_run_{run:02d}.csv"),
                  ["generation", "best_mrmse", "mean_mrmse"],
                  [[row["generation"], repr(row["best_mrmse"]), repr(row["mean_mrmse"])] for row in r.log], cfg)
        runs.append({"run": run, "expression": r.model.canonical(), "train_mrmse": r.train_mrmse,
                     "validation_mrmse": score})
    write_json(_path(cfg, "models", f"cluster_{cluster}_isige_runs.json"),
               {"cluster": cluster, "seed": seed, "runs": runs}, cfg)
    return chosen


def _load_models(cfg):
    index = read_json(_path(cfg, "models", "index.json"), "train")["clusters"]
    models = {}
    for c, entry in index.items():
        for m in cfg.methods:
            if m in entry["skipped"]:
                continue
            if m not in entry["methods"]:
                raise DependencyError(f"no {m} model for cluster {c}; run `train --method {m}`", "train")
            doc = read_json(_model_path(cfg, int(c), m), "train")
            models.setdefault(int(c), {})[m] = FdeModel.from_json(doc["model"])
    return models


def cmd_evaluate(cfg):
    models = _load_models(cfg)
    segments = {s.id: s for s in _clustered_segments(cfg)}
    splits = _splits(cfg)
    records, scores, counts = [], {}, {}
    for c in sorted(models):
        test = [segments[i] for i in splits[c].test]
        rec, sc = ev.evaluate_cluster(models[c], test, c)
        records += rec
        scores.update({(c, m): v for m, v in sc.items()})
        counts[c] = len(test)
    if not records:
        raise DataError("no cluster has a trained model to evaluate")
    report = ev.peg_report(records, mrmse_values=scores, segment_counts=counts)
    write_json(_path(cfg, "evaluation.json"), report.to_json(), cfg)
    path = _path(cfg, "predictions.csv")
    ev.write_predictions_csv(path, records)
    prepend_header(path, cfg)


def _report_from_artifacts(cfg):
    doc = read_json(_path(cfg, "evaluation.json"), "evaluate")
    path = _path(cfg, "predictions.csv")
    if not os.path.exists(path):
        raise DependencyError(f"{path} not found; run `evaluate` first", "evaluate")
    records = [r for r in ev.read_predictions_csv(path) if r.method in cfg.methods]
    scores = {(e["cluster"], e["method"]): e["mrmse"] for e in doc["mrmse"] if e["method"] in cfg.methods}
    counts = {int(c): n for c, n in doc["segments"].items()}
    return ev.peg_report(records, mrmse_values=scores, segment_counts=counts), records


def cmd_report(cfg):
    report, records = _report_from_artifacts(cfg)
    models = _load_models(cfg)
    out = _path(cfg, "report")
    _ensure_dir(out)
    formats = cfg.report_formats()
    if "csv" in formats:
        for name, writer in (("mrmse.csv", ev.write_mrmse_csv), ("peg_zones.csv", ev.write_zones_csv),
                             ("peg_horizons.csv", ev.write_horizons_csv)):
            writer(os.path.join(out, name), report)
            prepend_header(os.path.join(out, name), cfg)
    if "json" in formats:
        write_json(os.path.join(out, "report.json"), report.to_json(), cfg)
    lines = [header_line(cfg)]
    for c in sorted(models):
        for m in sorted(models[c], key=ev._method_key):
            lines.append(f"cluster {c}\t{m}\t{models[c][m].canonical()}\n")
    with open(os.path.join(out, "expressions.txt"), "w") as fh:
        fh.writelines(lines)
    if "svg" in formats:
        note = header_line(cfg)[2:].strip()
        for m in report.methods:
            ev.plot_horizon_bands(os.path.join(out, f"horizons_{m}.svg"), report, m, note=note)
            for h in (2, 4, 8):
                sub = [r for r in records if r.method == m and r.horizon == h]
                if sub:
                    minutes = h * 15
                    ev.plot_peg_scatter(os.path.join(out, f"peg_{m}_{minutes}min.svg"), sub,
                                        f"{m}, {minutes} min", note=note)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "cluster": cmd_cluster,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="glucofde", description=__doc__)
    parser.add_argument("command", choices=COMMANDS + ("all",),
                        help="pipeline stage to run; 'all' runs every stage in order")
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--method", help="comma-separated subset of mean,sindy,isige")
    parser.add_argument("--threads", type=int, help="worker processes for evolutionary runs")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--grammar", help="BNF grammar file for evolution")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def overrides_from_args(args):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.method is not None:
        o["methods"] = args.method
    if args.threads is not None:
        o["threads"] = args.threads
    paths = {}
    if args.out is not None:
        paths["out"] = args.out
    if args.grammar is not None:
        paths["grammar"] = args.grammar
    if paths:
        o["paths"] = paths
    return o


def run(command, cfg):
    stages = COMMANDS if command == "all" else (command,)
    for stage in stages:
        log.info("running %s", stage)
        HANDLERS[stage](cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, overrides_from_args(args))
        run(args.command, cfg)
    except (ConfigError, GrammarError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DataError, SchemaError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GlucoFdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
