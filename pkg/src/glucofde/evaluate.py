"""Accuracy and clinical-safety evaluation: MRMSE, mean baseline and the Parkes error grid."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.prepared import prep

from .errors import DomainError, SchemaError
from .fde import FdeModel, SegmentBatch, predict_batch, segment_rmse
from .variables import HORIZONS, MEAL_INDEX, STEP_MINUTES

log = logging.getLogger(__name__)

ZONES = ("A", "B", "C", "D", "E")
BANDS = {"A+B": ("A", "B"), "C": ("C",), "D+E": ("D", "E")}
ZONE_MEANINGS = {
    "A": "prediction close to the reference",
    "B": "no action or only benign treatment",
    "C": "overcorrection of acceptable glucose",
    "D": "dangerous failure to detect and treat",
    "E": "erroneous treatment, opposite of what is needed",
}


# ---------------------------------------------------------------------------
# baseline and MRMSE


def mean_baseline(train_segments):
    """Model predicting the training average of each post-meal step, whatever the segment."""
    if not train_segments:
        raise DomainError("mean baseline needs training segments")
    post = np.stack([np.asarray(s.samples)[MEAL_INDEX + 1:, 0] for s in train_segments])
    return FdeModel("mean_baseline", baseline=tuple(post.mean(axis=0)), metadata={"n_train": len(train_segments)})


def mrmse(model, segments):
    if not segments:
        raise DomainError("MRMSE over no segments")
    return float(segment_rmse(model, SegmentBatch.from_segments(segments)).mean())


# ---------------------------------------------------------------------------
# Parkes error grid


@dataclass
class PegGrid:
    domain: tuple
    regions: list  # (zone, shapely polygon), cumulative, lowest risk first
    version: int = 1

    def __post_init__(self):
        self._prepared = [(z, prep(p)) for z, p in self.regions]

    def zone_polygons(self):
        """Disjoint polygon of each zone (region minus all lower-risk regions)."""
        out, covered = {}, None
        for zone, poly in self.regions:
            out[zone] = poly if covered is None else poly.difference(covered)
            covered = poly if covered is None else covered.union(poly)
        return out

    def classify(self, reference, prediction):
        reference, prediction = float(reference), float(prediction)
        if reference < 0 or prediction < 0 or math.isnan(reference) or math.isnan(prediction):
            raise DomainError(f"glucose pair ({reference}, {prediction}) outside the grid")
        hi = self.domain[1]
        if reference > hi or prediction > hi:
            log.warning("pair (%s, %s) clamped to %s mg/dL", reference, prediction, hi)
            reference, prediction = min(reference, hi), min(prediction, hi)
        pt = Point(reference, prediction)
        for zone, region in self._prepared:
            if region.covers(pt):
                return zone
        raise DomainError(f"pair ({reference}, {prediction}) is not covered by the grid")


def load_peg_grid(path=None):
    if path is None:
        text = resources.files("glucofde").joinpath("data/parkes_type1.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    try:
        regions = [(r["zone"], Polygon(r["polygon"])) for r in doc["regions"]]
        domain = tuple(doc["domain"])
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"error grid file: {exc}") from None
    if [z for z, _ in regions] != list(ZONES):
        raise SchemaError("error grid regions must be listed A to E")
    for zone, poly in regions:
        if not poly.is_valid:
            raise SchemaError(f"error grid region {zone} is not a valid polygon")
    return PegGrid(domain, regions, doc.get("version", 1))


@lru_cache(maxsize=1)
def default_grid():
    return load_peg_grid()


def peg_classify(reference, prediction, grid=None):
    return (grid or default_grid()).classify(reference, prediction)


# ---------------------------------------------------------------------------
# reports


@dataclass
class PredictionRecord:
    cluster: int
    method: str
    segment_id: str
    horizon: int  # 1..8 steps ahead
    reference: float
    prediction: float
    zone: str = None


def _percentages(zones, labels):
    n = len(zones)
    return {z: 100.0 * sum(1 for x in zones if x == z) / n for z in labels}


@dataclass
class EvalReport:
    methods: list
    clusters: list
    segments: dict = field(default_factory=dict)  # cluster -> test segment count
    mrmse: dict = field(default_factory=dict)  # (cluster, method) -> value
    zones: dict = field(default_factory=dict)  # (cluster, method) -> {zone: %}
    counts: dict = field(default_factory=dict)  # (cluster, method) -> pair count
    horizons: dict = field(default_factory=dict)  # (method, horizon) -> {band: %}

    def mean_zones(self, method):
        rows = [self.zones[(c, method)] for c in self.clusters if (c, method) in self.zones]
        return {z: float(np.mean([r[z] for r in rows])) for z in ZONES} if rows else {}

    def mean_mrmse(self, method):
        vals = [self.mrmse[(c, method)] for c in self.clusters if (c, method) in self.mrmse]
        return float(np.mean(vals)) if vals else float("nan")

    def to_json(self):
        return {
            "methods": self.methods,
            "clusters": self.clusters,
            "segments": {str(c): n for c, n in self.segments.items()},
            "mrmse": [{"cluster": c, "method": m, "mrmse": v} for (c, m), v in sorted(self.mrmse.items())],
            "zones": [{"cluster": c, "method": m, "pairs": self.counts[(c, m)], **p}
                      for (c, m), p in sorted(self.zones.items())],
            "horizons": [{"method": m, "minutes": h * STEP_MINUTES, **p}
                         for (m, h), p in sorted(self.horizons.items())],
        }


def peg_report(records, grid=None, mrmse_values=None, segment_counts=None):
    """Aggregate prediction/reference pairs into zone and horizon tables.

    Records without a zone are classified here; predictions outside the grid
    are handled by :func:`zone_for`.
    """
    records = list(records)
    if not records:
        raise DomainError("no prediction records")
    grid = grid or default_grid()
    for r in records:
        if r.zone is None:
            r.zone = zone_for(r.reference, r.prediction, grid)
    methods = sorted({r.method for r in records}, key=_method_key)
    clusters = sorted({r.cluster for r in records})
    report = EvalReport(methods, clusters)
    groups, by_horizon, seg_ids = {}, {}, {}
    for r in records:
        groups.setdefault((r.cluster, r.method), []).append(r.zone)
        by_horizon.setdefault((r.method, r.horizon), []).append(r.zone)
        seg_ids.setdefault(r.cluster, set()).add(r.segment_id)
    for key, zones in groups.items():
        report.zones[key] = _percentages(zones, ZONES)
        report.counts[key] = len(zones)
    for key, zones in by_horizon.items():
        report.horizons[key] = {band: 100.0 * sum(z in members for z in zones) / len(zones)
                                for band, members in BANDS.items()}
    report.segments = dict(segment_counts) if segment_counts else {c: len(s) for c, s in seg_ids.items()}
    report.mrmse = dict(mrmse_values or {})
    return report


_METHOD_ORDER = {"mean": 0, "mean_baseline": 0, "sindy": 1, "isige": 2}


def _method_key(m):
    return (_METHOD_ORDER.get(m, 9), m)


def zone_for(reference, prediction, grid=None):
    """Zone of one pair; failed predictions count as E and negative ones are clipped to 0."""
    if not math.isfinite(prediction):
        return "E"
    if prediction < 0:
        log.warning("negative prediction %s clipped to 0 for grid lookup", prediction)
        prediction = 0.0
    return (grid or default_grid()).classify(reference, prediction)


def evaluate_cluster(models, test_segments, cluster, grid=None):
    """Predict every test segment with every model.

    Returns ``(records, mrmse)`` where ``mrmse`` maps method to value.
    """
    if not test_segments:
        raise DomainError(f"cluster {cluster} has no test segments")
    batch = SegmentBatch.from_segments(test_segments)
    records, scores = [], {}
    for method, model in models.items():
        pred, ok = predict_batch(model, batch)
        scores[method] = float(segment_rmse(model, batch).mean())
        for i, seg in enumerate(test_segments):
            for h in range(HORIZONS):
                p = float(pred[i, h]) if ok[i] else float("nan")
                ref = float(batch.actual[i, h])
                records.append(PredictionRecord(cluster, method, seg.id, h + 1, ref, p, zone_for(ref, p, grid)))
    return records, scores


# ---------------------------------------------------------------------------
# output


def _fmt(v, digits=2):
    return f"{v:.{digits}f}"


def write_mrmse_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "segments"] + report.methods)
        for c in report.clusters:
            w.writerow([c, report.segments.get(c, "")] + [
                _fmt(report.mrmse[(c, m)]) if (c, m) in report.mrmse else "" for m in report.methods])
        n = [report.segments[c] for c in report.clusters if c in report.segments]
        w.writerow(["mean", _fmt(float(np.mean(n))) if n else ""] + [_fmt(report.mean_mrmse(m)) for m in report.methods])


def write_zones_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "test_segments"] + [f"{m}_{z}" for m in report.methods for z in ZONES])
        for c in report.clusters:
            row = [c, report.segments.get(c, "")]
            for m in report.methods:
                p = report.zones.get((c, m))
                row += [_fmt(p[z], 1) if p else "" for z in ZONES]
            w.writerow(row)
        n = [report.segments[c] for c in report.clusters if c in report.segments]
        row = ["mean", _fmt(float(np.mean(n)), 1) if n else ""]
        for m in report.methods:
            means = report.mean_zones(m)
            row += [_fmt(means[z], 1) if means else "" for z in ZONES]
        w.writerow(row)


def write_horizons_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "minutes"] + list(BANDS))
        for (m, h), p in sorted(report.horizons.items(), key=lambda kv: (_method_key(kv[0][0]), kv[0][1])):
            w.writerow([m, h * STEP_MINUTES] + [_fmt(p[b]) for b in BANDS])


def write_predictions_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster", "method", "segment_id", "minutes", "reference", "prediction", "zone"])
        for r in records:
            w.writerow([r.cluster, r.method, r.segment_id, r.horizon * STEP_MINUTES,
                        repr(r.reference), repr(r.prediction), r.zone])


def read_predictions_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            out.append(PredictionRecord(int(row["cluster"]), row["method"], row["segment_id"],
                                        int(row["minutes"]) // STEP_MINUTES, float(row["reference"]),
                                        float(row["prediction"]), row["zone"]))
    return out


# ---------------------------------------------------------------------------
# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "glucofde"
    return plt


def _save_svg(fig, path, note=None):
    meta = {"Date": None}
    if note:
        meta["Description"] = note
    fig.savefig(path, format="svg", metadata=meta)


def plot_horizon_bands(path, report, method, note=None):
    """Stacked areas of the A+B, C and D+E shares against prediction horizon."""
    plt = _pyplot()
    minutes = [h * STEP_MINUTES for h in range(1, HORIZONS + 1)]
    stacks = [[report.horizons.get((method, h), {}).get(b, 0.0) for h in range(1, HORIZONS + 1)] for b in BANDS]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.stackplot(minutes, stacks, labels=list(BANDS), colors=["#4c9a2a", "#e3b505", "#c0392b"])
    ax.set_xlim(minutes[0], minutes[-1])
    ax.set_ylim(0, 100)
    ax.set_xlabel("prediction horizon (min)")
    ax.set_ylabel("pairs (%)")
    ax.set_title(method)
    ax.legend(loc="lower left")
    fig.tight_layout()
    _save_svg(fig, path, note)
    plt.close(fig)


def plot_peg_scatter(path, records, title, grid=None, note=None):
    """Reference/prediction pairs over the zone boundaries."""
    plt = _pyplot()
    grid = grid or default_grid()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for _, poly in grid.regions[:-1]:
        x, y = poly.exterior.xy
        ax.plot(x, y, color="0.4", lw=0.8)
    pts = [(r.reference, r.prediction) for r in records if math.isfinite(r.prediction)]
    if pts:
        xs, ys = zip(*pts)
        ax.scatter(np.clip(xs, 0, grid.domain[1]), np.clip(ys, 0, grid.domain[1]), s=6, alpha=0.6)
    ax.set_xlim(*grid.domain)
    ax.set_ylim(*grid.domain)
    ax.set_xlabel("reference (mg/dL)")
    ax.set_ylabel("prediction (mg/dL)")
    ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path, note)
    plt.close(fig)
