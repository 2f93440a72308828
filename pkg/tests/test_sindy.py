import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glucofde import expression as ex
from glucofde.errors import DomainError, NumericalError
from glucofde.fde import iterate
from glucofde.sindy import SindyLibrarySpec, build_library, fit_sindy, ridge_solve, stlsq
from glucofde.variables import MEAL_INDEX, SEGMENT_LENGTH, VAR_INDEX


def _segments(n, seed=0):
    rng = np.random.default_rng(seed)
    out = rng.uniform(0.5, 3.0, size=(n, SEGMENT_LENGTH, 7))
    out[:, :, 0] = rng.uniform(80, 250, size=(n, SEGMENT_LENGTH))
    return list(out)


def test_default_library_columns():
    cols = SindyLibrarySpec().columns()
    assert len(cols) == 36
    assert cols[:8] == ["1", "G", "B_I", "I_B", "F_ch", "HR", "C", "S"]
    assert cols[8] == "G*B_I" and cols[-1] == "S*S"
    assert len(set(cols)) == 36


def test_lag_and_derivative_columns():
    spec = SindyLibrarySpec(lag_features=[("I_B", 2)], derivative_features=True)
    assert spec.columns()[-3:] == ["I_B[t-2]", "dG", "d2G"]
    with pytest.raises(DomainError):
        SindyLibrarySpec(lag_features=[("X", 1)])
    with pytest.raises(DomainError):
        SindyLibrarySpec(lag_features=[("HR", 9)])


def test_library_rows_by_hand():
    seg = _segments(1)[0]
    spec = SindyLibrarySpec(lag_features=[("HR", 1)], derivative_features=True)
    theta, y, names = build_library([seg], spec)
    assert theta.shape == (8, len(names))
    i = 3  # fourth post-meal transition
    row = theta[i]
    t = MEAL_INDEX + i
    assert row[names.index("1")] == 1.0
    assert row[names.index("F_ch*HR")] == seg[t, VAR_INDEX["F_ch"]] * seg[t, VAR_INDEX["HR"]]
    assert row[names.index("HR[t-1]")] == seg[t - 1, VAR_INDEX["HR"]]
    assert row[names.index("dG")] == seg[t, 0] - seg[t - 1, 0]
    assert y[i] == seg[t + 1, 0] - seg[t, 0]


def test_ridge_closed_form():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(50, 4))
    y = rng.normal(size=50)
    lam = 0.7
    expected = np.linalg.inv(a.T @ a + lam * np.eye(4)) @ a.T @ y
    assert np.allclose(ridge_solve(a, y, lam), expected, rtol=1e-6)


def test_singular_system_is_reported():
    a = np.ones((10, 2))
    with pytest.raises(NumericalError):
        ridge_solve(a, np.ones(10), 0.0)


def test_stlsq_zero_target():
    rng = np.random.default_rng(2)
    fit = stlsq(rng.normal(size=(30, 5)), np.zeros(30))
    assert not fit.coefficients.any()


def test_stlsq_recovers_sparse_ols():
    rng = np.random.default_rng(3)
    theta = rng.normal(size=(400, 10))
    truth = np.zeros(10)
    truth[[1, 4, 7]] = [3.0, -2.0, 1.5]
    y = theta @ truth
    fit = stlsq(theta, y, lam=0.5, ridge=0.0)
    assert np.flatnonzero(fit.coefficients).tolist() == [1, 4, 7]
    ols = np.linalg.lstsq(theta[:, [1, 4, 7]], y, rcond=None)[0]
    assert np.allclose(fit.coefficients[[1, 4, 7]], ols, rtol=1e-10)


def test_stlsq_warns_when_underdetermined():
    rng = np.random.default_rng(4)
    with pytest.warns(UserWarning, match="underdetermined"):
        stlsq(rng.normal(size=(3, 5)), rng.normal(size=3))


def test_stlsq_rejects_non_finite():
    with pytest.raises(DomainError):
        stlsq(np.array([[np.nan, 1.0]] * 4), np.ones(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0), st.integers(2, 12))
def test_stlsq_sparsity_and_shrinking_support(seed, lam, p):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=(40, p))
    y = theta @ (rng.normal(size=p) * (rng.random(p) < 0.5)) + 0.1 * rng.normal(size=40)
    fit = stlsq(theta, y, lam=lam, max_iters=5)
    xi = fit.coefficients
    assert np.all((xi == 0) | (np.abs(xi) >= lam))
    for before, after in zip(fit.support_history, fit.support_history[1:]):
        assert not np.any(after & ~before)


def test_fit_sindy_exact_recovery_in_raw_units():
    segs = _segments(40)
    truth = {"G*B_I": -0.05, "F_ch": 2.0, "HR*C": 0.8}
    for s in segs:
        for i in range(MEAL_INDEX, MEAL_INDEX + 8):
            x = s[i]
            step = (truth["G*B_I"] * x[0] * x[VAR_INDEX["B_I"]] + truth["F_ch"] * x[VAR_INDEX["F_ch"]]
                    + truth["HR*C"] * x[VAR_INDEX["HR"]] * x[VAR_INDEX["C"]])
            s[i + 1, 0] = s[i, 0] + step
    model = fit_sindy(segs, lam=0.5, ridge=0.0)
    got = {c: v for c, v in zip(model.metadata["columns"], model.metadata["coefficients"]) if v}
    assert set(got) == set(truth)
    for k, v in truth.items():
        assert got[k] == pytest.approx(v, rel=1e-6)
    # the emitted expression reproduces the data
    for s in segs[:5]:
        assert np.allclose(iterate(model, s), s[MEAL_INDEX + 1:, 0], rtol=1e-6)


def test_fit_sindy_intercept_only():
    segs = _segments(10)
    for s in segs:
        s[MEAL_INDEX:, 0] = s[MEAL_INDEX, 0] + 4.0 * np.arange(SEGMENT_LENGTH - MEAL_INDEX)
    model = fit_sindy(segs, lam=0.5, ridge=0.0)
    assert ex.to_string(model.expr, time_suffix=False) == "G + 4"


def test_fit_sindy_without_standardization_matches_plain_stlsq():
    segs = _segments(20, seed=9)
    theta, y, names = build_library(segs)
    direct = stlsq(theta, y, lam=0.5)
    model = fit_sindy(segs, lam=0.5, standardize=False)
    assert np.allclose(model.metadata["coefficients"], direct.coefficients)
