"""Command-line entry point: synth, featurize, train, predict, eval, explain."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import gbt
from .config import RunConfig, load_config
from .errors import DataError, WaitPredError
from .evaluation import report_json, run_experiment
from .features import FeatureMatrix, FeatureSchema, Task
from .io_utils import read_json, write_atomic, write_json
from .pipeline import fit_features
from .synth import generate
from .trip_data import chrono_split, parse_trips

log = logging.getLogger("waitpred")


def schema_path(features_csv) -> Path:
    p = Path(features_csv)
    return p.with_name(p.stem + ".schema.json")


def save_matrix(fm: FeatureMatrix, path) -> None:
    write_atomic(path, fm.to_csv())
    write_json(schema_path(path), fm.schema.to_dict())


def load_matrix(path) -> FeatureMatrix:
    try:
        schema = FeatureSchema.from_dict(read_json(schema_path(path)))
        with open(path, encoding="utf-8") as fh:
            return FeatureMatrix.from_csv(fh.read(), schema)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read feature matrix {path}: {exc}") from exc


def _timestamp(args) -> str | None:
    if args.no_timestamp:
        return None
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    write_atomic(out_dir / "config.resolved.json", cfg.resolved_json())


def _load_trips(cfg: RunConfig, path, out_dir: Path | None):
    result = parse_trips(path, cfg.grid.build())
    if out_dir is not None:
        write_atomic(out_dir / "rejections.csv", result.rejection_csv())
    if result.rejections:
        log.warning("%d trip rows rejected", len(result.rejections))
    if not result.trips:
        raise DataError(f"no valid trips in {path}")
    return result.trips


def cmd_synth(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out)
    result = generate(cfg.synth_config())
    write_atomic(out / "trips.csv", result.to_csv())
    write_json(out / "truth.json", result.truth, indent=None)
    _echo_config(cfg, out)


def cmd_featurize(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out)
    trips = _load_trips(cfg, args.trips, out)
    train, test = chrono_split(trips, cfg.eval.train_frac)
    fitted = fit_features(train, Task(args.task), cfg, with_interactions=not args.base_only)
    save_matrix(fitted.transform(train), out / "train.csv")
    if test:
        save_matrix(fitted.transform(test), out / "test.csv")
    write_json(out / "featurizer.json", fitted.to_dict(), indent=None)
    _echo_config(cfg, out)


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    fm = load_matrix(args.features)
    model = gbt.train(fm, cfg.gbt.params(), cfg.gbt.n_threads)
    gbt.save_model(model, args.out, _timestamp(args))


def cmd_predict(args) -> None:
    model = gbt.load_model(args.model)
    fm = load_matrix(args.features)
    pred = gbt.predict(model, fm)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["order_id", "wt_pred_s"])
    ids = fm.ids or [str(i) for i in range(len(fm))]
    for oid, p in zip(ids, pred):
        w.writerow([oid, repr(float(p))])
    write_atomic(args.out, buf.getvalue())


def cmd_eval(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out)
    trips = _load_trips(cfg, args.trips, out)
    result = run_experiment(cfg, trips)
    for r in result.reports:
        write_atomic(out / "reports" / f"{r.model_name}_{r.task.value}.json", report_json(r))
    for (name, task), model in result.models.items():
        gbt.save_model(model, out / "models" / f"{name}_{task}.json", _timestamp(args))
    write_atomic(out / "summary.csv", result.summary_csv())
    _echo_config(cfg, out)


def cmd_explain(args) -> None:
    model = gbt.load_model(args.model)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "feature", "importance"])
    for rank, (name, value) in enumerate(gbt.importance(model), start=1):
        w.writerow([rank, name, repr(value)])
    write_atomic(args.out, buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waitpred", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--no-timestamp", action="store_true", help="omit creation timestamps from outputs")
        return p

    p = add("synth", cmd_synth, "generate a synthetic trip CSV and truth log")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")

    p = add("featurize", cmd_featurize, "fit featurizers on the train split and write feature matrices")
    p.add_argument("--config")
    p.add_argument("--trips", required=True)
    p.add_argument("--task", choices=[t.value for t in Task], required=True)
    p.add_argument("--base-only", action="store_true", help="skip interaction features")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train a boosted tree model on a feature matrix")
    p.add_argument("--config")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="model JSON path")

    p = add("predict", cmd_predict, "predict waiting times for a feature matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="predictions CSV path")

    p = add("eval", cmd_eval, "run the full model x task experiment matrix")
    p.add_argument("--config")
    p.add_argument("--trips", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = add("explain", cmd_explain, "rank features by normalized gain importance")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="importance CSV path")
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except WaitPredError as exc:
        kind = {2: "config", 3: "data"}.get(exc.exit_code, "internal")
        print(f"error\t{kind}\t{args.command}\t{_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"error\tinternal\t{args.command}\t{_one_line(repr(exc))}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
