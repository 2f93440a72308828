"""Raw series, meal segments, CSV/JSON persistence, synthetic data and splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from . import expression as ex
from .errors import ConfigError, DataError, EmptyClusterError, SchemaError
from .fde import FdeModel
from .variables import MEAL_INDEX, SEGMENT_LENGTH, STEP_MINUTES, VAR_INDEX, VARIABLES

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("participant", "timestamp") + VARIABLES
STEP = timedelta(minutes=STEP_MINUTES)


@dataclass
class RawSeries:
    participant_id: str
    timestamps: list
    channels: dict
    gap_flags: np.ndarray = None

    def __post_init__(self):
        n = len(self.timestamps)
        self.channels = {v: np.asarray(self.channels[v], dtype=float) for v in VARIABLES}
        for v, values in self.channels.items():
            if len(values) != n:
                raise DataError(f"{self.participant_id}: channel {v} has {len(values)} samples, expected {n}")
        if self.gap_flags is None:
            self.gap_flags = np.zeros(n, dtype=bool)
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b <= a:
                raise DataError(f"{self.participant_id}: timestamps not increasing at {b.isoformat()}")

    def __len__(self):
        return len(self.timestamps)

    def matrix(self):
        return np.column_stack([self.channels[v] for v in VARIABLES])


@dataclass
class Segment:
    id: str
    participant: str
    meal_time: datetime
    samples: np.ndarray
    cluster_id: int = None
    gap_flags: np.ndarray = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.shape != (SEGMENT_LENGTH, len(VARIABLES)):
            raise DataError(f"segment {self.id}: expected shape {(SEGMENT_LENGTH, len(VARIABLES))}, got {self.samples.shape}")
        if self.gap_flags is None:
            self.gap_flags = np.zeros(SEGMENT_LENGTH, dtype=bool)
        self.gap_flags = np.asarray(self.gap_flags, dtype=bool)

    def channel(self, name):
        return self.samples[:, VAR_INDEX[name]]

    @property
    def post_meal_glucose(self):
        return self.samples[MEAL_INDEX + 1:, 0]

    def to_json(self):
        return {
            "id": self.id,
            "participant": self.participant,
            "meal_time": self.meal_time.isoformat(),
            "cluster_id": self.cluster_id,
            "samples": self.samples.tolist(),
            "gap_flags": [int(f) for f in self.gap_flags],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            obj["id"],
            obj["participant"],
            datetime.fromisoformat(obj["meal_time"]),
            np.array(obj["samples"], dtype=float),
            obj.get("cluster_id"),
            np.array(obj.get("gap_flags", [0] * SEGMENT_LENGTH), dtype=bool),
        )


@dataclass
class Split:
    train: list
    validation: list
    test: list
    seed: int
    cluster_id: int = None

    def to_json(self):
        return {"cluster_id": self.cluster_id, "seed": self.seed, "train": self.train,
                "validation": self.validation, "test": self.test}

    @classmethod
    def from_json(cls, obj):
        return cls(list(obj["train"]), list(obj["validation"]), list(obj["test"]), obj["seed"], obj.get("cluster_id"))


# ---------------------------------------------------------------------------
# CSV


def _fmt(value):
    return "" if math.isnan(value) else repr(float(value))


def write_raw_csv(path, series_list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s in series_list:
            for i, ts in enumerate(s.timestamps):
                writer.writerow([s.participant_id, ts.isoformat()] + [_fmt(s.channels[v][i]) for v in VARIABLES])


def load_raw_csv(path, strict=False):
    """Read per-participant series.  Empty cells load as NaN (missing samples).

    Rows that cannot be parsed are logged with their line number and skipped,
    or raise :class:`DataError` when ``strict`` is set.
    """
    rows = {}
    with open(path, newline="") as fh:
        lines = (line for line in fh)
        reader = csv.reader(line for line in lines if not line.lstrip().startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {', '.join(missing)}")
        pos = {c: header.index(c) for c in CSV_COLUMNS}
        for row in reader:
            lineno = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                ts = datetime.fromisoformat(row[pos["timestamp"]].strip())
                values = [float(row[pos[v]]) if row[pos[v]].strip() else math.nan for v in VARIABLES]
            except ValueError as exc:
                msg = f"{path}: malformed row at line {lineno}: {exc}"
                if strict:
                    raise DataError(msg) from None
                log.warning(msg)
                continue
            rows.setdefault(row[pos["participant"]].strip(), []).append((ts, values, lineno))

    out = []
    for pid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        for prev, cur in zip(recs, recs[1:]):
            if cur[0] == prev[0]:
                raise DataError(f"{path}: duplicate timestamp {cur[0].isoformat()} for {pid} at line {cur[2]}")
        mat = np.array([r[1] for r in recs], dtype=float).reshape(len(recs), len(VARIABLES))
        out.append(RawSeries(pid, [r[0] for r in recs], {v: mat[:, k] for k, v in enumerate(VARIABLES)}))
    return out


# ---------------------------------------------------------------------------
# segments JSON


def write_segments(path, segments, meta=None):
    doc = {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "segments": [s.to_json() for s in segments]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_segments(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {doc.get('schema_version')!r}")
    return [Segment.from_json(s) for s in doc["segments"]]


# ---------------------------------------------------------------------------
# split


def split_sizes(n):
    """Return ``(train, validation, test)`` counts for a cluster of ``n`` segments."""
    test = math.ceil(n / 3)
    validation = math.ceil((n - test) / 3)
    return n - test - validation, validation, test


def split_cluster(segments, seed, cluster_id=None):
    """Seeded shuffle of one cluster into train/validation/test id lists."""
    if not segments:
        raise EmptyClusterError("cannot split an empty cluster")
    ids = sorted(s.id for s in segments)
    if cluster_id is None:
        cluster_id = segments[0].cluster_id
    key = [seed] if cluster_id is None else [seed, int(cluster_id)]
    order = np.random.default_rng(np.random.SeedSequence(key)).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, n_test = split_sizes(len(ids))
    return Split(
        train=sorted(shuffled[:n_train]),
        validation=sorted(shuffled[n_train:n_train + n_val]),
        test=sorted(shuffled[n_train + n_val:]),
        seed=seed,
        cluster_id=cluster_id,
    )


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    participants: int = 3
    days: int = 10
    start: str = "2024-01-01T00:00:00"
    # meal clock times as hours of day, each jittered by up to meal_jitter steps
    meal_hours: tuple = (8.0, 13.5, 20.0)
    meal_jitter: int = 3
    carbs_range: tuple = (20.0, 60.0)
    carb_ratio_range: tuple = (8.0, 14.0)  # grams per insulin unit
    basal_range: tuple = (0.025, 0.035)
    bolus_offset: int = 2  # steps
    bolus_spread: float = 0.3
    correction_rate: float = 0.5  # per day
    initial_glucose: float = 120.0
    noise_sigma: float = 0.0
    # right-hand side f of G(t+1) = G(t) + f(x(t))
    ground_truth: str = "36*pow(10,-1) + F_ch - G*B_I"
    preprocess: object = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for key in ("meal_hours", "carbs_range", "carb_ratio_range", "basal_range"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"synthetic data config: {exc}") from None


def ground_truth_model(config):
    try:
        rhs = ex.parse_expression(config.ground_truth, fold=True)
    except Exception as exc:
        raise ConfigError(f"ground truth {config.ground_truth!r}: {exc}") from None
    for f in ex.factors(rhs):
        if ex.split_factor(f)[1]:
            raise ConfigError("ground truth may not use lagged factors")
    return FdeModel("ground_truth", expr=ex.fde(rhs), metadata={"noise_sigma": config.noise_sigma})


def _exogenous(rng, n, config):
    """Raw exogenous channels for one participant (before preprocessing)."""
    steps_per_day = 24 * 60 // STEP_MINUTES
    steps_per_hour = 60 // STEP_MINUTES
    carbs = np.zeros(n)
    bolus = np.zeros(n)
    ratio = rng.uniform(*config.carb_ratio_range)
    # a small snack at the very first sample keeps absorbed amounts positive afterwards
    carbs[0] = 10.0
    bolus[0] = 1.0
    for day in range(config.days):
        for hour in config.meal_hours:
            idx = day * steps_per_day + int(round(hour * steps_per_hour))
            idx += int(rng.integers(-config.meal_jitter, config.meal_jitter + 1))
            if 0 < idx < n:
                grams = round(float(rng.uniform(*config.carbs_range)))
                carbs[idx] = grams
                # boluses are neither exactly on time nor exactly proportional to the meal
                at = min(n - 1, max(1, idx + int(rng.integers(-config.bolus_offset, config.bolus_offset + 1))))
                dose = grams / ratio * rng.uniform(1 - config.bolus_spread, 1 + config.bolus_spread)
                bolus[at] += max(0.5, round(dose * 2) / 2)
        if rng.random() < config.correction_rate:
            bolus[int(rng.integers(day * steps_per_day, min(n, (day + 1) * steps_per_day)))] += 1.0

    base = rng.uniform(*config.basal_range)
    hourly = rng.uniform(0.85, 1.15, size=n // steps_per_hour + 1)
    basal = base * np.repeat(hourly, steps_per_hour)[:n] * (1 + 0.02 * rng.standard_normal(n))

    hr = np.empty(n)
    rest = rng.uniform(58, 72)
    level = rest
    for i in range(n):
        level = rest + 0.8 * (level - rest) + rng.normal(0, 3)
        hr[i] = level
    steps = np.floor(np.exp(rng.normal(4.0, 1.0, size=n))) + 1
    hr = np.clip(hr + 0.01 * steps, 45, None)
    calories = 18 + 0.04 * steps + 0.1 * (hr - 60) + rng.uniform(0, 2, size=n)
    calories = np.clip(calories, 5, None)
    return {
        "B_I": np.round(basal, 5),
        "I_B": bolus,
        "F_ch": carbs,
        "HR": np.round(hr, 1),
        "C": np.round(calories, 2),
        "S": steps,
    }


def generate_synthetic(config, seed):
    """Simulate participants whose glucose follows a known difference equation.

    Exogenous channels are drawn at random, turned into model features with the
    same preprocessing used on real data, and glucose is stepped forward with
    the ground-truth model.  Measurement noise of standard deviation
    ``noise_sigma`` is added to the reported glucose only.
    """
    from .preprocess import PreprocessConfig, features

    model = ground_truth_model(config)
    fn = ex.compile_expression(model.expr)
    pre = config.preprocess or PreprocessConfig()
    start = datetime.fromisoformat(config.start)
    n = config.days * 24 * 60 // STEP_MINUTES
    if n < SEGMENT_LENGTH:
        raise ConfigError("synthetic series too short for a single segment")
    root = np.random.SeedSequence(seed)
    series = []
    for p, child in enumerate(root.spawn(config.participants)):
        rng = np.random.default_rng(child)
        raw = _exogenous(rng, n, config)
        raw["G"] = np.zeros(n)
        timestamps = [start + i * STEP for i in range(n)]
        feat = features(RawSeries(f"P{p + 1:02d}", timestamps, raw), pre)
        g = np.empty(n)
        g[0] = config.initial_glucose
        for i in range(n - 1):
            env = {f: feat[i, VAR_INDEX[f]] for f in fn.factors}
            env["G"] = g[i]
            g[i + 1] = float(fn(env))
            if not math.isfinite(g[i + 1]) or g[i + 1] <= 0:
                raise ConfigError(f"ground truth drives glucose to {g[i + 1]!r} at step {i + 1}")
        if config.noise_sigma > 0:
            g = np.maximum(g + rng.normal(0.0, config.noise_sigma, size=n), 1.0)
        raw["G"] = g
        series.append(RawSeries(f"P{p + 1:02d}", timestamps, raw))
    return series, model
