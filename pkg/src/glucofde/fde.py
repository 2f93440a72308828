"""Finite difference models of glucose and their step-by-step evaluation.

A model maps the state at step ``i`` to the glucose estimate at ``i + 1``.
Only glucose is fed back: the other channels always take their measured
values at step ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import expression as ex
from .errors import DomainError, EvaluationError, SchemaError
from .variables import HORIZONS, MEAL_INDEX, VAR_INDEX, VARIABLES

SENTINEL = 1e9
KINDS = ("isige", "sindy", "mean_baseline", "ground_truth")


@dataclass
class FdeModel:
    kind: str
    expr: object = None
    baseline: tuple = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown model kind {self.kind!r}")
        if self.kind == "mean_baseline":
            if self.expr is not None or self.baseline is None:
                raise SchemaError("baseline model needs a means vector and no expression")
            if len(self.baseline) != HORIZONS:
                raise SchemaError(f"baseline must have {HORIZONS} values")
            self.baseline = tuple(float(v) for v in self.baseline)
        else:
            if self.expr is None or self.baseline is not None:
                raise SchemaError(f"{self.kind} model needs exactly an expression")
            for f in ex.factors(self.expr):
                name, _ = ex.split_factor(f)
                if name not in VAR_INDEX:
                    raise SchemaError(f"unknown variable {name!r} in model")

    def canonical(self):
        if self.expr is None:
            return "mean(" + ", ".join(ex.format_number(round(v, 6)) for v in self.baseline) + ")"
        return ex.to_string(self.expr)

    def to_json(self):
        out = {"kind": self.kind}
        if self.expr is not None:
            out["expression"] = ex.to_string(self.expr)
            out["ast"] = ex.to_json(self.expr)
        else:
            out["baseline"] = list(self.baseline)
        out["metadata"] = dict(self.metadata)
        return out

    @classmethod
    def from_json(cls, obj):
        try:
            kind = obj["kind"]
            meta = dict(obj.get("metadata", {}))
            if kind == "mean_baseline":
                return cls(kind, baseline=tuple(obj["baseline"]), metadata=meta)
            node = ex.from_json(obj["ast"]) if "ast" in obj else ex.parse_expression(obj["expression"])
            return cls(kind, expr=node, metadata=meta)
        except KeyError as exc:
            raise SchemaError(f"model JSON missing field {exc}") from None


def eval_expr(expr, values):
    """Evaluate at one state; raises :class:`EvaluationError` on singular or non-finite steps."""
    missing = [v for v in VARIABLES if v not in values]
    if missing:
        raise DomainError(f"unbound variables: {', '.join(missing)}")
    return ex.eval_checked(expr, values)


def _samples_of(segment):
    samples = getattr(segment, "samples", segment)
    return np.asarray(samples, dtype=float)


def _factor_value(factor, samples, step, g_path):
    name, lag = ex.split_factor(factor)
    j = MEAL_INDEX + step - lag
    if j < 0:
        raise DomainError(f"lag of {lag} steps reaches before the segment start")
    if name == "G" and j >= MEAL_INDEX:
        return g_path[j - MEAL_INDEX]
    return float(samples[j, VAR_INDEX[name]])


def iterate(model, segment):
    """Predict glucose at the 8 post-meal steps, feeding back only the estimate of G."""
    samples = _samples_of(segment)
    if model.kind == "mean_baseline":
        return np.array(model.baseline)
    g_path = [float(samples[MEAL_INDEX, 0])]
    names = ex.factors(model.expr)
    for i in range(HORIZONS):
        env = {f: _factor_value(f, samples, i, g_path) for f in names}
        for v in VARIABLES:
            env.setdefault(v, float(samples[MEAL_INDEX + i, VAR_INDEX[v]]))
        env["G"] = g_path[-1]
        try:
            g_path.append(eval_expr(model.expr, env))
        except EvaluationError as exc:
            raise EvaluationError(f"step {i + 1}: {exc}") from None
    return np.array(g_path[1:])


def rmse(pred, actual):
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.size == 0:
        raise DomainError(f"rmse needs equal nonempty lengths, got {pred.shape} and {actual.shape}")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


# ---------------------------------------------------------------------------
# vectorized evaluation over many segments


class SegmentBatch:
    """Segments stacked per channel for fast evaluation of many candidate models."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 2:
            samples = samples[None]
        self.samples = samples
        self.n = samples.shape[0]
        # channel name -> (17, n) contiguous array
        self.columns = {v: np.ascontiguousarray(samples[:, :, k].T) for k, v in enumerate(VARIABLES)}
        self.actual = samples[:, MEAL_INDEX + 1:, 0]

    @classmethod
    def from_segments(cls, segments):
        return cls(np.stack([_samples_of(s) for s in segments]))


@lru_cache(maxsize=100_000)
def _compiled(expr):
    fn = ex.compile_expression(expr)
    plan = []
    for f in fn.factors:
        name, lag = ex.split_factor(f)
        if lag > MEAL_INDEX:
            raise DomainError(f"lag of {lag} steps reaches before the segment start")
        plan.append((f, name, lag))
    return fn, tuple(plan)


def predict_batch(model, batch):
    """Return ``(predictions (n, 8), ok (n,))``; rows with a non-finite step are not ok."""
    if model.kind == "mean_baseline":
        pred = np.tile(np.array(model.baseline), (batch.n, 1))
        return pred, np.ones(batch.n, dtype=bool)
    return predict_expr(model.expr, batch)


def predict_expr(expr, batch):
    fn, plan = _compiled(expr)
    n = batch.n
    cols = batch.columns
    g_path = [cols["G"][MEAL_INDEX]]
    with np.errstate(all="ignore"):
        for i in range(HORIZONS):
            env = {}
            for f, name, lag in plan:
                j = MEAL_INDEX + i - lag
                if name == "G" and j >= MEAL_INDEX:
                    env[f] = g_path[j - MEAL_INDEX]
                else:
                    env[f] = cols[name][j]
            value = fn(env)
            if np.ndim(value) == 0:
                value = np.full(n, float(value))
            g_path.append(value)
        pred = np.stack(g_path[1:], axis=1)
    ok = np.isfinite(pred).all(axis=1)
    return pred, ok


def segment_rmse(model_or_expr, batch):
    """Per-segment RMSE with the sentinel for failed or overflowing evaluations."""
    if isinstance(model_or_expr, FdeModel):
        pred, ok = predict_batch(model_or_expr, batch)
    else:
        pred, ok = predict_expr(model_or_expr, batch)
    with np.errstate(all="ignore"):
        err = np.sqrt(np.mean((pred - batch.actual) ** 2, axis=1))
    err = np.where(ok & np.isfinite(err), err, SENTINEL)
    return np.minimum(err, SENTINEL)


# ---------------------------------------------------------------------------
# simplification


def _is_const(node, value=None):
    return isinstance(node, ex.Const) and (value is None or node.value == value)


def _simplify_once(node):
    if isinstance(node, ex.Neg):
        inner = _simplify_once(node.operand)
        if isinstance(inner, ex.Const):
            return ex.Const(-inner.value)
        if isinstance(inner, ex.Neg):
            return inner.operand
        return ex.Neg(inner)
    if isinstance(node, ex.Pow):
        return node.base if node.exponent == 1 else node
    if not isinstance(node, ex.BinOp):
        return node
    a, b = _simplify_once(node.left), _simplify_once(node.right)
    op = node.op
    if _is_const(a) and _is_const(b):
        return ex.fold_constants(ex.BinOp(op, a, b))
    if op == "+":
        if _is_const(a, 0):
            return b
        if _is_const(b, 0):
            return a
        if isinstance(b, ex.Neg):
            return ex.BinOp("-", a, b.operand)
        if _is_const(b) and b.value < 0:
            return ex.BinOp("-", a, ex.Const(-b.value))
    elif op == "-":
        if _is_const(b, 0):
            return a
        if _is_const(a, 0):
            return ex.Neg(b)
        if a == b:
            return ex.Const(0.0)
        if isinstance(b, ex.Neg):
            return ex.BinOp("+", a, b.operand)
        if _is_const(b) and b.value < 0:
            return ex.BinOp("+", a, ex.Const(-b.value))
    else:
        if _is_const(a, 0) or _is_const(b, 0):
            return ex.Const(0.0)
        if _is_const(a, 1):
            return b
        if _is_const(b, 1):
            return a
        if _is_const(a, -1):
            return ex.Neg(b)
        if _is_const(b, -1):
            return ex.Neg(a)
    return ex.BinOp(op, a, b)


def simplify(expr):
    """Fold constants and drop neutral elements until nothing changes."""
    prev = None
    node = expr
    while node != prev:
        prev, node = node, _simplify_once(node)
    return node

