import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import make_trip
from waitpred.config import parse_config
from waitpred.errors import DataError
from waitpred.evaluation import (
    EvalReport,
    StageError,
    error_cdf,
    fit_linear_baseline,
    mae,
    make_report,
    rmse,
    run_experiment,
)
from waitpred.features import Availability, Column, FeatureMatrix, FeatureSchema, Kind, Task

finite = st.floats(-1e4, 1e4, allow_nan=False)


def _fm(X, y):
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    cols = tuple(Column(f"f{j}", Kind.CONTINUOUS, Availability.PRE_OK) for j in range(X.shape[1]))
    return FeatureMatrix(FeatureSchema(Task.PRE, cols), X, y)


def test_mae_examples():
    assert mae([110, 190], [100, 200]) == 10
    assert mae([5, 6, 7], [5, 6, 7]) == 0
    assert mae([0, 300], [100, 100]) == 150


def test_rmse_examples():
    assert rmse([110, 190], [100, 200]) == 10
    assert rmse([0, 300], [100, 100]) == math.sqrt(25000)
    assert rmse([0, 300], [100, 100]) == pytest.approx(158.114, abs=1e-3)


def test_metric_input_errors():
    with pytest.raises(DataError):
        mae([], [])
    with pytest.raises(DataError):
        rmse([1, 2], [1])
    with pytest.raises(DataError):
        mae([1.0], [float("nan")])


@settings(max_examples=300)
@given(st.integers(1, 40).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite), arrays(float, n, elements=finite))))
def test_mae_at_most_rmse(pair):
    a, p = pair
    assert mae(a, p) <= rmse(a, p) * (1 + 1e-12) + 1e-12


@settings(max_examples=100)
@given(st.integers(1, 30).flatmap(lambda n: st.tuples(arrays(float, n, elements=finite), arrays(float, n, elements=finite))),
       st.floats(-1e3, 1e3))
def test_metrics_shift_invariant(pair, c):
    a, p = pair
    assert mae(a + c, p + c) == pytest.approx(mae(a, p), rel=1e-9, abs=1e-6)
    assert rmse(a + c, p + c) == pytest.approx(rmse(a, p), rel=1e-9, abs=1e-6)


def test_cdf_examples():
    assert error_cdf([0, 0, 0], [30, 150, 400], [60, 120, 300]) == [(60, 1 / 3), (120, 1 / 3), (300, 2 / 3)]
    assert [f for _, f in error_cdf([1, 2], [1, 2], [0, 10])] == [1.0, 1.0]


@settings(max_examples=100)
@given(arrays(float, 25, elements=finite), st.lists(st.floats(0, 1e4), min_size=1, max_size=8))
def test_cdf_non_decreasing_and_matches_count(err, thresholds):
    thresholds = sorted(thresholds)
    cdf = error_cdf(np.zeros(25), err, thresholds)
    fracs = [f for _, f in cdf]
    assert fracs == sorted(fracs)
    for t, f in cdf:
        assert f == sum(abs(e) <= t for e in err) / 25


def test_cdf_needs_sorted_thresholds():
    with pytest.raises(DataError):
        error_cdf([1], [1], [10, 5])


# linear baseline ---------------------------------------------------------


def test_exact_line():
    x = np.linspace(-5, 5, 11)
    lm = fit_linear_baseline(_fm(x, 3 * x + 5), ridge=0.0)
    assert abs(lm.coef[0] - 3) < 1e-8 and abs(lm.intercept - 5) < 1e-8


def test_constant_column_warns_but_solves():
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(size=30), np.full(30, 4.0)])
    with pytest.warns(UserWarning):
        lm = fit_linear_baseline(_fm(X, 2 * X[:, 0]), ridge=1.0)
    assert np.all(np.isfinite(lm.coef))


def test_singular_system_is_data_error():
    x = np.arange(10.0)
    with pytest.raises(DataError):
        fit_linear_baseline(_fm(np.column_stack([x, np.full(10, 1.0)]), x), ridge=0.0)


def _mp_ridge(X, y, ridge):
    mpmath.mp.dps = 50
    n, p = X.shape
    xm = [mpmath.fsum(mpmath.mpf(X[i, j]) for i in range(n)) / n for j in range(p)]
    ym = mpmath.fsum(mpmath.mpf(v) for v in y) / n
    Xc = mpmath.matrix([[mpmath.mpf(X[i, j]) - xm[j] for j in range(p)] for i in range(n)])
    yc = mpmath.matrix([mpmath.mpf(v) - ym for v in y])
    A = Xc.T * Xc + ridge * mpmath.eye(p)
    b = mpmath.lu_solve(A, Xc.T * yc)
    intercept = ym - mpmath.fsum(xm[j] * b[j] for j in range(p))
    return [float(b[j]) for j in range(p)], float(intercept)


@pytest.mark.parametrize("ridge", [0.0, 1.0])
def test_matches_high_precision_solve(ridge):
    rng = np.random.default_rng(42)
    X = rng.normal(size=(200, 5)) * [1, 10, 100, 0.1, 3]
    y = X @ [1.0, -2.0, 0.03, 40.0, 0.5] + 7 + rng.normal(size=200)
    lm = fit_linear_baseline(_fm(X, y), ridge=ridge)
    coef, intercept = _mp_ridge(X, y, ridge)
    Xq = rng.normal(size=(50, 5)) * [1, 10, 100, 0.1, 3]
    want = Xq @ np.array(coef) + intercept
    np.testing.assert_allclose(lm.predict(Xq), want, rtol=1e-6)


# reports and the experiment matrix ---------------------------------------


def test_report_rejects_inconsistent_metrics():
    with pytest.raises(Exception):
        EvalReport(Task.PRE, "LR", 10.0, 5.0, [])
    with pytest.raises(Exception):
        EvalReport(Task.PRE, "LR", 1.0, 2.0, [(1, 0.5), (2, 0.4)])


def test_make_report_fields():
    r = make_report(Task.POST, "LR", [0, 300], [100, 100], [120])
    assert (r.mae_s, r.n_test, r.error_cdf) == (150, 2, [(120.0, 0.5)])


SMALL = {
    "synth": {"n_trips": 4000},
    "gbt": {"num_trees": 20},
    "interactions": {"epochs": 10},
}


def test_experiment_matrix_is_complete_and_deterministic(synth_trips):
    cfg = parse_config(SMALL)
    a = run_experiment(cfg, synth_trips)
    b = run_experiment(cfg, synth_trips)
    assert [(r.model_name, r.task.value) for r in a.reports] == [
        (m, t) for t in ("pre", "post") for m in ("LR", "GBT-base", "FiXGBoost")
    ]
    assert a.summary_csv() == b.summary_csv()
    assert all(r.n_test == len(synth_trips) - math.ceil(0.8 * len(synth_trips)) for r in a.reports)
    base = a.models[("GBT-base", "pre")]
    assert "cf_O__D_aff" not in base.feature_names and len(base.feature_names) == 8
    assert len(a.models[("FiXGBoost", "post")].feature_names) == 10 + 29
    header = a.summary_csv().splitlines()[0]
    assert header == "model,task,mae_s,rmse_s,n_test,frac_under_120s"


def test_experiment_reports_failing_stage():
    cfg = parse_config(SMALL)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(StageError) as info:
            run_experiment(cfg, [make_trip()])
    assert info.value.stage == "split"
    assert info.value.exit_code == 3
