"""Sparse regression of the glucose step on a library of candidate terms."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import expression as ex
from .errors import DomainError, NumericalError
from .fde import FdeModel
from .variables import HORIZONS, MEAL_INDEX, VAR_INDEX, VARIABLES

log = logging.getLogger(__name__)

DERIVATIVE_COLUMNS = ("dG", "d2G")


@dataclass(frozen=True)
class SindyLibrarySpec:
    include_constant: bool = True
    include_linear: bool = True
    include_quadratic: bool = True
    lag_features: tuple = ()  # (variable, lag) pairs
    derivative_features: bool = False

    def __post_init__(self):
        lags = tuple((str(v), int(k)) for v, k in self.lag_features)
        for v, k in lags:
            if v not in VAR_INDEX:
                raise DomainError(f"unknown lag variable {v!r}")
            if not 1 <= k <= MEAL_INDEX:
                raise DomainError(f"lag {k} outside 1..{MEAL_INDEX}")
        if len(set(lags)) != len(lags):
            raise DomainError("duplicate lag features")
        object.__setattr__(self, "lag_features", lags)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "lag_features" in d:
            d["lag_features"] = tuple(tuple(p) for p in d["lag_features"])
        return cls(**d)

    def columns(self):
        cols = []
        if self.include_constant:
            cols.append("1")
        if self.include_linear:
            cols.extend(VARIABLES)
        if self.include_quadratic:
            cols.extend(f"{a}*{b}" for a, b in combinations(VARIABLES, 2))
            cols.extend(f"{v}*{v}" for v in VARIABLES)
        cols.extend(ex.lagged(v, k) for v, k in self.lag_features)
        if self.derivative_features:
            cols.extend(DERIVATIVE_COLUMNS)
        if not cols:
            raise DomainError("the candidate library is empty")
        return cols


def _column_values(name, samples, idx):
    """Values of one library column at sample indices ``idx`` of a (n, 17, 7) stack."""
    if name == "1":
        return np.ones((samples.shape[0], len(idx)))
    g = samples[:, :, 0]
    if name == "dG":
        return g[:, idx] - g[:, idx - 1]
    if name == "d2G":
        return g[:, idx] - 2 * g[:, idx - 1] + g[:, idx - 2]
    out = 1.0
    for factor in name.split("*"):
        var, lag = ex.split_factor(factor)
        out = out * samples[:, idx - lag, VAR_INDEX[var]]
    return out


def build_library(segments, spec=SindyLibrarySpec()):
    """Design matrix over the 8 post-meal transitions of every segment.

    Returns ``(theta, dG, column_names)``; row order is segment-major.
    """
    if not segments:
        raise DomainError("cannot build a library from no segments")
    samples = np.stack([np.asarray(getattr(s, "samples", s), dtype=float) for s in segments])
    idx = np.arange(MEAL_INDEX, MEAL_INDEX + HORIZONS)
    names = spec.columns()
    theta = np.column_stack([_column_values(c, samples, idx).reshape(-1) for c in names])
    g = samples[:, :, 0]
    target = (g[:, idx + 1] - g[:, idx]).reshape(-1)
    return theta, target, names


@dataclass
class SindyFit:
    coefficients: np.ndarray
    column_names: list
    lam: float
    iterations: int
    support_history: list = field(default_factory=list)


def ridge_solve(a, y, weight):
    gram = a.T @ a
    if weight:
        gram = gram + weight * np.eye(a.shape[1])
    if a.shape[1] and np.linalg.cond(gram) > 1e13:
        raise NumericalError("normal equations are singular")
    try:
        return np.linalg.solve(gram, a.T @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(str(exc)) from None


def stlsq(theta, y, lam=0.5, max_iters=20, ridge=None, column_names=None):
    """Sequentially thresholded ridge regression.

    ``lam`` is the hard threshold and, unless ``ridge`` is given, also the
    ridge weight.
    """
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.isfinite(theta).all() and np.isfinite(y).all()):
        raise DomainError("non-finite entries in the regression problem")
    n, p = theta.shape
    if n < p:
        warnings.warn(f"{n} rows for {p} columns; the fit is underdetermined", stacklevel=2)
    weight = lam if ridge is None else ridge
    active = np.ones(p, dtype=bool)
    xi = np.zeros(p)
    history = [active.copy()]
    iterations = 0
    stable = False
    while iterations < max_iters and active.any():
        iterations += 1
        xi = np.zeros(p)
        xi[active] = ridge_solve(theta[:, active], y, weight)
        small = active & (np.abs(xi) < lam)
        if not small.any():
            stable = True
            break
        active &= ~small
        xi[~active] = 0.0
        history.append(active.copy())
    if not stable and active.any():
        xi = np.zeros(p)
        xi[active] = ridge_solve(theta[:, active], y, weight)
        # no iterations left to re-fit, so anything below threshold is dropped outright
        xi[np.abs(xi) < lam] = 0.0
    if not active.any():
        xi = np.zeros(p)
    names = list(column_names) if column_names is not None else [f"x{j}" for j in range(p)]
    return SindyFit(xi, names, lam, iterations, history)


def _term(name, coef):
    """Expression for ``coef * column`` with ``coef`` > 0."""
    if name == "1":
        return ex.Const(coef)
    if name == "dG":
        col = ex.sub(ex.variable("G"), ex.variable("G[t-1]"))
    elif name == "d2G":
        col = ex.add(ex.sub(ex.variable("G"), ex.mul(ex.Const(2.0), ex.variable("G[t-1]"))), ex.variable("G[t-2]"))
    else:
        col = ex.Var(tuple(name.split("*")))
    return col if coef == 1 else ex.mul(ex.Const(coef), col)


def expression_from_terms(terms):
    """``G + c1*col1 + c2*col2 ...`` from ``[(column, coefficient), ...]``."""
    node = ex.variable("G")
    for name, coef in terms:
        if coef == 0:
            continue
        op = "+" if coef > 0 else "-"
        node = ex.BinOp(op, node, _term(name, abs(coef)))
    return node


def fit_sindy(segments, spec=SindyLibrarySpec(), lam=0.5, max_iters=20, ridge=None, standardize=True):
    """Fit a sparse difference equation and return it as a model.

    With ``standardize`` the non-constant columns are centred and scaled
    before thresholding, so one threshold is meaningful across terms of very
    different magnitude; the reported model is mapped back to raw units.
    """
    theta, y, names = build_library(segments, spec)
    p = len(names)
    const = names.index("1") if "1" in names else None
    if standardize:
        mu = theta.mean(axis=0)
        sd = theta.std(axis=0)
        usable = sd > 0
        if const is not None:
            usable[const] = True
            mu[const], sd[const] = 0.0, 1.0
        dropped = [names[j] for j in range(p) if not usable[j]]
        if dropped:
            log.warning("constant library columns dropped: %s", ", ".join(dropped))
        if const is None:
            mu = np.zeros(p)
        z = np.zeros_like(theta)
        z[:, usable] = (theta[:, usable] - mu[usable]) / sd[usable]
        fit = stlsq(z[:, usable], y, lam, max_iters, ridge, [n for n, u in zip(names, usable) if u])
        xi = np.zeros(p)
        xi[usable] = fit.coefficients
        beta = np.where(usable, xi / sd, 0.0)
        if const is not None:
            beta[const] = xi[const] - float(np.sum(np.delete(beta * mu, const)))
            # the constant column has unit scale in both spaces, so the same threshold applies
            if abs(beta[const]) < lam:
                beta[const] = 0.0
        standardized = xi
    else:
        fit = stlsq(theta, y, lam, max_iters, ridge, names)
        beta = fit.coefficients
        standardized = None
    terms = [(n, float(b)) for n, b in zip(names, beta) if b != 0.0]
    expr = expression_from_terms(terms)
    meta = {
        "columns": names,
        "coefficients": [float(b) for b in beta],
        "lambda": lam,
        "iterations": fit.iterations,
        "standardized": bool(standardize),
    }
    if standardized is not None:
        meta["standardized_coefficients"] = [float(v) for v in standardized]
    return FdeModel("sindy", expr=expr, metadata=meta)
