"""Error metrics, the linear baseline, and the model x task experiment matrix."""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gbt
from .config import RunConfig
from .errors import DataError, WaitPredError
from .features import BASE_POST_COLUMNS, BASE_PRE_COLUMNS, FeatureMatrix, Task
from .pipeline import fit_features
from .trip_data import LabeledTrip, chrono_split

log = logging.getLogger(__name__)

MODELS = ("LR", "GBT-base", "FiXGBoost")


def _pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.shape != p.shape or a.ndim != 1:
        raise DataError(f"actual/predicted shapes differ: {a.shape} vs {p.shape}")
    if len(a) == 0:
        raise DataError("cannot score an empty test set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(p))):
        raise DataError("non-finite values in actual/predicted")
    return a, p


def mae(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def rmse(actual, predicted) -> float:
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def error_cdf(actual, predicted, thresholds: Sequence[float]) -> list[tuple[float, float]]:
    """Fraction of rows whose absolute error is at most each threshold."""
    a, p = _pair(actual, predicted)
    if list(thresholds) != sorted(thresholds):
        raise DataError("thresholds must be sorted ascending")
    err = np.sort(np.abs(a - p))
    return [(float(t), float(np.searchsorted(err, t, side="right")) / len(err)) for t in thresholds]


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


def fit_linear_baseline(fm: FeatureMatrix, ridge: float = 1.0) -> LinearModel:
    """Ridge least squares with an unpenalized intercept.

    Centering X and y removes the intercept from the penalized system:
    ``(Xc'Xc + ridge I) b = Xc'yc`` and ``intercept = mean(y) - mean(X) b``.
    """
    if fm.labels is None or len(fm) == 0:
        raise DataError("linear baseline needs a non-empty labelled matrix")
    X, y = fm.rows, fm.labels
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc, yc = X - x_mean, y - y_mean
    constant = np.flatnonzero(np.ptp(X, axis=0) == 0)
    if len(constant):
        names = [fm.schema.names[i] for i in constant]
        if ridge > 0:
            warnings.warn(f"constant feature column(s) {names}; ridge keeps the system solvable", stacklevel=2)
    A = Xc.T @ Xc + ridge * np.eye(X.shape[1])
    try:
        cond = np.linalg.cond(A)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"condition number {cond:.3g}")
        coef = np.linalg.solve(A, Xc.T @ yc)
    except np.linalg.LinAlgError as exc:
        raise DataError(f"linear baseline system is singular (ridge={ridge}): {exc}") from exc
    return LinearModel(coef, float(y_mean - x_mean @ coef))


@dataclass
class EvalReport:
    task: Task
    model_name: str
    mae_s: float
    rmse_s: float
    error_cdf: list[tuple[float, float]]
    importance: list[tuple[str, float]] = field(default_factory=list)
    n_test: int = 0

    def __post_init__(self):
        # power-mean inequality; tiny slack for rounding when all errors are equal
        if not 0.0 <= self.mae_s <= self.rmse_s * (1 + 1e-12) + 1e-12:
            raise WaitPredError(f"inconsistent metrics mae={self.mae_s} rmse={self.rmse_s}")
        fracs = [f for _, f in self.error_cdf]
        if any(b < a for a, b in zip(fracs, fracs[1:])) or any(not 0 <= f <= 1 for f in fracs):
            raise WaitPredError("error CDF must be non-decreasing within [0, 1]")

    def frac_under(self, threshold: float) -> float:
        for t, f in self.error_cdf:
            if t == threshold:
                return f
        raise KeyError(threshold)

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "model_name": self.model_name,
            "mae_s": self.mae_s,
            "rmse_s": self.rmse_s,
            "error_cdf": [list(p) for p in self.error_cdf],
            "importance": [list(p) for p in self.importance],
            "n_test": self.n_test,
        }


def make_report(task: Task, name: str, actual, predicted, thresholds, importance=()) -> EvalReport:
    return EvalReport(
        task=task,
        model_name=name,
        mae_s=mae(actual, predicted),
        rmse_s=rmse(actual, predicted),
        error_cdf=error_cdf(actual, predicted, thresholds),
        importance=list(importance),
        n_test=len(actual),
    )


@dataclass
class ExperimentResult:
    reports: list[EvalReport]
    models: dict[tuple[str, str], gbt.GbtModel]

    def report(self, model_name: str, task: Task) -> EvalReport:
        return next(r for r in self.reports if r.model_name == model_name and r.task is task)

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "task", "mae_s", "rmse_s", "n_test", "frac_under_120s"])
        for r in self.reports:
            frac = next((f for t, f in r.error_cdf if t == 120.0), None)
            w.writerow([r.model_name, r.task.value, repr(r.mae_s), repr(r.rmse_s), r.n_test,
                        "" if frac is None else repr(frac)])
        return buf.getvalue()


class StageError(WaitPredError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.exit_code = getattr(cause, "exit_code", 4)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_experiment(cfg: RunConfig, trips: Sequence[LabeledTrip]) -> ExperimentResult:
    """Train and score {LR, GBT-base, FiXGBoost} x {PRE, POST} on a chronological split.

    LR and GBT-base see the base features only; FiXGBoost adds the
    interaction families. All featurization state is fitted on the train split.
    """
    train_trips, test_trips = _stage("split", chrono_split, trips, cfg.eval.train_frac)
    if not test_trips:
        raise StageError("split", DataError("empty test split"))
    params = cfg.gbt.params()
    thresholds = cfg.eval.cdf_thresholds
    reports: list[EvalReport] = []
    models: dict[tuple[str, str], gbt.GbtModel] = {}
    for task in (Task.PRE, Task.POST):
        fitted = _stage(f"featurize-{task.value}", fit_features, train_trips, task, cfg)
        train_fm = _stage(f"featurize-{task.value}", fitted.transform, train_trips)
        test_fm = _stage(f"featurize-{task.value}", fitted.transform, test_trips)
        base_names = [c.name for c in (BASE_PRE_COLUMNS if task is Task.PRE else BASE_POST_COLUMNS)]
        train_base, test_base = train_fm.select(base_names), test_fm.select(base_names)
        y = test_fm.labels

        lr = _stage(f"LR-{task.value}", fit_linear_baseline, train_base, cfg.eval.ridge)
        reports.append(make_report(task, "LR", y, lr.predict(test_base.rows), thresholds))

        for name, tr, te in (("GBT-base", train_base, test_base), ("FiXGBoost", train_fm, test_fm)):
            log.info("training %s/%s on %d rows x %d features", name, task.value, len(tr), tr.rows.shape[1])
            model = _stage(f"{name}-{task.value}", gbt.train, tr, params, cfg.gbt.n_threads)
            pred = gbt.predict(model, te)
            reports.append(make_report(task, name, y, pred, thresholds, gbt.importance(model)))
            models[(name, task.value)] = model
    return ExperimentResult(reports, models)


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=1) + "\n"
