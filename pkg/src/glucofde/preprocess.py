"""Feature preparation: absorption curves, smoothing, shifts, gap filling and
meal-centred segment extraction with quality constraints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .data import STEP, RawSeries, Segment
from .errors import ConfigError, DataError, DomainError
from .variables import MEAL_INDEX, SEGMENT_LENGTH, STEP_MINUTES, VAR_INDEX, VARIABLES

log = logging.getLogger(__name__)

DOSE_CHANNELS = ("I_B", "F_ch")


@dataclass(frozen=True)
class BergerParams:
    s: float = 1.6
    a: float = 5.2
    b: float = 41.0

    def __post_init__(self):
        if self.s <= 0:
            raise DomainError("Berger s must be positive")


@dataclass(frozen=True)
class BatemanParams:
    k_a: float = 0.1
    k_e: float = 0.2
    V: float = 0.5
    f: float = 0.5

    def __post_init__(self):
        if self.V <= 0 or not 0 < self.f <= 1:
            raise DomainError("Bateman needs V > 0 and 0 < f <= 1")


def _check_dose(dose, horizon):
    if dose < 0:
        raise DomainError(f"negative dose {dose}")
    if horizon < 1:
        raise DomainError("horizon must be at least one step")


def berger_rate(t, dose, params=BergerParams()):
    """Instantaneous absorption rate at ``t`` steps after a dose (dose units per step).

    The half-absorption time grows linearly with the dose, ``a*dose + b``
    minutes, and is converted to steps.
    """
    if dose == 0:
        return np.zeros_like(np.asarray(t, dtype=float))
    t = np.asarray(t, dtype=float)
    s = params.s
    t50 = (params.a * dose + params.b) / STEP_MINUTES
    ts = np.power(t, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = s * ts * t50**s * dose / (t * (t50**s + ts) ** 2)
    return np.where(t > 0, rate, 0.0)


def berger_absorption(dose, params=BergerParams(), horizon=16):
    """Active amount after a dose, integrated by explicit Euler at one step per sample.

    Returns ``horizon + 1`` values for t = 0..horizon.
    """
    _check_dose(dose, horizon)
    out = np.zeros(horizon + 1)
    rates = berger_rate(np.arange(horizon), dose, params)
    for n in range(horizon):
        out[n + 1] = out[n] + (rates[n] - out[n])
    return np.maximum(out, 0.0)


def bateman_absorption(dose, params=BatemanParams(), horizon=16):
    """Bateman concentration curve for t = 0..horizon, kept nonnegative."""
    _check_dose(dose, horizon)
    if params.k_a == params.k_e:
        raise DomainError("Bateman curve is undefined for k_a == k_e")
    t = np.arange(horizon + 1, dtype=float)
    pre = params.f * dose / params.V * abs(params.k_a / (params.k_a - params.k_e))
    return pre * np.abs(np.exp(-params.k_a * t) - np.exp(-params.k_e * t))


def moving_average(series, window=2):
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise DomainError("moving average of an empty series")
    out = np.empty_like(x)
    for i in range(len(x)):
        out[i] = x[max(0, i - window + 1):i + 1].mean()
    return out


def time_shift(series, shift=2):
    """Delay a series by ``shift`` samples; the first ``shift`` become NaN."""
    x = np.asarray(series, dtype=float)
    if len(x) < shift:
        raise DomainError(f"series of length {len(x)} is shorter than shift {shift}")
    if shift == 0:
        return x.copy()
    out = np.full_like(x, np.nan)
    out[shift:] = x[:-shift]
    return out


def interpolate_gaps(series, max_gap=4):
    """Linearly fill interior NaN runs of at most ``max_gap`` samples.

    Returns ``(values, flags)`` where flags mark the filled samples.
    """
    x = np.array(series, dtype=float)
    flags = np.zeros(len(x), dtype=bool)
    missing = np.isnan(x)
    i = 0
    while i < len(x):
        if not missing[i]:
            i += 1
            continue
        j = i
        while j < len(x) and missing[j]:
            j += 1
        if i > 0 and j < len(x) and j - i <= max_gap:
            left, right = x[i - 1], x[j]
            span = j - i + 1
            for k in range(i, j):
                x[k] = left + (right - left) * (k - i + 1) / span
            flags[i:j] = True
        i = j
    return x, flags


def absorb(doses, curve, horizon):
    """Superpose one absorption curve per nonzero dose (NaN counts as no dose)."""
    doses = np.nan_to_num(np.asarray(doses, dtype=float), nan=0.0)
    out = np.zeros(len(doses))
    for i in np.flatnonzero(doses > 0):
        c = curve(doses[i], horizon)
        end = min(len(doses), i + len(c))
        out[i:end] += c[:end - i]
    return out


@dataclass(frozen=True)
class PreprocessConfig:
    berger: BergerParams = BergerParams()
    bateman: BatemanParams = BatemanParams()
    insulin_model: str = "berger"
    carb_model: str = "bateman"
    absorption_horizon: int = 96
    smooth_channels: tuple = ("HR", "S")
    smooth_window: int = 2
    shift: int = 2
    shift_channels: tuple = DOSE_CHANNELS
    retain_unshifted: bool = True
    max_gap: int = 4
    change_limit: float = 0.25
    change_channels: tuple = ("G",)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown preprocessing keys: {', '.join(sorted(unknown))}")
        try:
            if "berger" in d:
                d["berger"] = BergerParams(**d["berger"])
            if "bateman" in d:
                d["bateman"] = BatemanParams(**d["bateman"])
        except (TypeError, DomainError) as exc:
            raise ConfigError(f"absorption parameters: {exc}") from None
        for key in ("smooth_channels", "shift_channels", "change_channels"):
            if key in d:
                d[key] = tuple(d[key])
                bad = [c for c in d[key] if c not in VAR_INDEX]
                if bad:
                    raise ConfigError(f"{key}: unknown channel(s) {', '.join(bad)}")
        return cls(**d)

    def curve(self, model):
        if model == "berger":
            return lambda dose, h: berger_absorption(dose, self.berger, h)
        if model == "bateman":
            return lambda dose, h: bateman_absorption(dose, self.bateman, h)
        raise ConfigError(f"unknown absorption model {model!r}")


@dataclass
class ProcessedSeries:
    participant_id: str
    timestamps: list
    values: np.ndarray  # (T, 7) model features
    meal_carbs: np.ndarray  # raw carbohydrate records, marks meals
    gap_flags: np.ndarray
    nonpositive_raw: np.ndarray  # a measured channel was <= 0 before smoothing
    shifted: dict = field(default_factory=dict)


def regularize(series):
    """Place samples on a 15-minute grid, inserting NaN rows for missing instants."""
    if len(series) == 0:
        raise DataError(f"{series.participant_id}: empty series")
    t0 = series.timestamps[0]
    idx = []
    for ts in series.timestamps:
        q, r = divmod(ts - t0, STEP)
        if r:
            raise DataError(f"{series.participant_id}: timestamp {ts.isoformat()} is off the 15-minute grid")
        idx.append(q)
    n = idx[-1] + 1
    if n == len(series):
        return series
    channels = {}
    for v in VARIABLES:
        col = np.full(n, np.nan)
        col[idx] = series.channels[v]
        channels[v] = col
    timestamps = [t0 + k * STEP for k in range(n)]
    return RawSeries(series.participant_id, timestamps, channels)


def _features(series, config):
    n = len(series)
    values = np.empty((n, len(VARIABLES)))
    flags = np.zeros(n, dtype=bool)
    nonpos = np.zeros(n, dtype=bool)
    shifted = {}
    models = {"I_B": config.insulin_model, "F_ch": config.carb_model}
    for v in VARIABLES:
        raw = series.channels[v]
        if v in DOSE_CHANNELS:
            col = absorb(raw, config.curve(models[v]), config.absorption_horizon)
        else:
            col, filled = interpolate_gaps(raw, config.max_gap)
            flags |= filled
            nonpos |= col <= 0
        values[:, VAR_INDEX[v]] = col
    for v in config.shift_channels:
        shifted[v] = time_shift(values[:, VAR_INDEX[v]], config.shift)
    for v in config.smooth_channels:
        values[:, VAR_INDEX[v]] = moving_average(values[:, VAR_INDEX[v]], config.smooth_window)
    if not config.retain_unshifted:
        for v, col in shifted.items():
            values[:, VAR_INDEX[v]] = col
    return values, flags, nonpos, shifted


def features(series, config=PreprocessConfig()):
    """Model features for one series on its own sample grid, shape (T, 7)."""
    return _features(series, config)[0]


def preprocess_series(series, config=PreprocessConfig()):
    series = regularize(series)
    values, flags, nonpos, shifted = _features(series, config)
    carbs = np.nan_to_num(series.channels["F_ch"], nan=0.0)
    return ProcessedSeries(series.participant_id, list(series.timestamps), values, carbs, flags, nonpos, shifted)


def _max_run(flags):
    best = run = 0
    for f in flags:
        run = run + 1 if f else 0
        best = max(best, run)
    return best


def check_constraints(samples, gap_flags=None, config=PreprocessConfig(), nonpositive_raw=None):
    """Return ``[(constraint, detail), ...]`` for every violated segment constraint."""
    samples = np.asarray(samples, dtype=float)
    out = []
    bad = ~np.isfinite(samples) | (samples <= 0)
    if bad.any():
        step, k = np.argwhere(bad)[0]
        out.append((1, f"{VARIABLES[k]} at index {step - MEAL_INDEX} is {samples[step, k]!r}"))
    elif nonpositive_raw is not None and np.any(nonpositive_raw):
        step = int(np.flatnonzero(nonpositive_raw)[0])
        out.append((1, f"measured value <= 0 at index {step - MEAL_INDEX}"))
    if gap_flags is not None:
        run = _max_run(gap_flags)
        if run > config.max_gap:
            out.append((2, f"{run} consecutive interpolated samples"))
    with np.errstate(all="ignore"):
        for v in config.change_channels:
            col = samples[:, VAR_INDEX[v]]
            prev, cur = col[:-1], col[1:]
            jump = np.abs(cur - prev) > config.change_limit * np.abs(prev)
            if jump.any():
                i = int(np.flatnonzero(jump)[0])
                out.append((3, f"{v} changes {prev[i]!r} -> {cur[i]!r} at index {i + 1 - MEAL_INDEX}"))
                break
    return out


def segment_id(participant, meal_time):
    return f"{participant}-{meal_time:%Y%m%dT%H%M}"


def build_segments(processed, config=PreprocessConfig()):
    """Cut one 17-sample window per recorded meal and keep those meeting the constraints.

    Returns ``(segments, rejections)``; each rejection is a dict with the
    segment id, the violated constraint numbers and a short detail.
    """
    segments, rejections = [], []
    n = len(processed.timestamps)
    half = SEGMENT_LENGTH // 2
    for m in np.flatnonzero(processed.meal_carbs > 0):
        meal_time = processed.timestamps[m]
        sid = segment_id(processed.participant_id, meal_time)
        if m < half or m + half >= n:
            log.debug("meal %s lacks a full window, skipped", sid)
            continue
        window = slice(m - half, m + half + 1)
        samples = processed.values[window]
        flags = processed.gap_flags[window]
        violations = check_constraints(samples, flags, config, processed.nonpositive_raw[window])
        if violations:
            rejections.append({
                "segment_id": sid,
                "constraint": ";".join(str(c) for c, _ in violations),
                "detail": "; ".join(d for _, d in violations),
            })
            continue
        segments.append(Segment(sid, processed.participant_id, meal_time, samples.copy(), None, flags.copy()))
    return segments, rejections


def preprocess_all(series_list, config=PreprocessConfig()):
    segments, rejections = [], []
    for s in sorted(series_list, key=lambda s: s.participant_id):
        seg, rej = build_segments(preprocess_series(s, config), config)
        segments.extend(seg)
        rejections.extend(rej)
    return segments, rejections

