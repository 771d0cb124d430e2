"""Command-line entry point: ``ulmguards {train,recalibrate,predict,simulate} --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 degenerate recalibration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import jsonschema
import numpy as np

from .datasets import GENERATORS, CsvError, Dataset, dataset_to_csv, load_csv
from .guards import (
    RecalibrationError,
    build_records,
    local_coverage,
    recalibrate_aggregate,
    recalibrate_single,
)
from .model import SelectiveModel
from .simulate import PANELS, SimulationConfig, run_panel, summarize_coverage
from .trainer import FoldPlan, TrainConfig, TrainingDiverged, kfold_train, train_ulm, tune_lambda

logger = logging.getLogger("ulmguards")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------- schemas

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_NUM_LIST = {"type": "array", "items": _NUM}
_INT_LIST = {"type": "array", "items": _INT}

DATA_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "properties": {
                "generator": {"enum": sorted(GENERATORS)},
                "n": {"type": "integer", "minimum": 1},
                "seed": _INT,
            },
            "required": ["generator", "n"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "csv": {"type": "string"},
                "features": {"type": ["array", "null"], "items": {"type": "string"}},
                "outcome": {"type": "string"},
                "outcome_kind": {"enum": ["real", "categorical"]},
            },
            "required": ["csv", "outcome"],
            "additionalProperties": False,
        },
    ]
}

HYPER_SCHEMA = {
    "type": "object",
    "properties": {k: _NUM for k in ("alpha", "delta", "lam", "gamma", "t_alpha")},
    "additionalProperties": False,
}

TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "hyper": HYPER_SCHEMA,
        "kind": {"enum": ["interval", "gaussian", "categorical"]},
        "decision_mode": {"enum": ["coupled", "separate"]},
        "hidden": _INT_LIST,
        "decision_hidden": _INT_LIST,
        "n_classes": {"type": ["integer", "null"]},
        "lr": _NUM,
        "momentum": _NUM,
        "epochs": _INT,
        "warmup_epochs": _INT,
        "batch_size": _INT,
        "m_penalty": {"type": ["integer", "null"]},
        "box_margin": _NUM,
        "clip_norm": {"type": ["number", "null"]},
        "beta_init": _NUM,
        "whiten": {"type": ["number", "null"]},
        "seed": _INT,
        "lambda_grid": _NUM_LIST,
        "K": _INT,
        "shared_fold_seed": {"type": "boolean"},
    },
    "additionalProperties": False,
}


def _sim_field_schema(name, val):
    if isinstance(val, tuple):
        return _INT_LIST if name == "hidden" else _NUM_LIST
    return _INT if isinstance(val, int) else _NUM


SIM_SCHEMA = {
    "type": "object",
    "properties": {
        name: _sim_field_schema(name, val) for name, val in asdict(SimulationConfig()).items()
    },
    "additionalProperties": False,
}

_OUT = {"type": "string"}

SCHEMAS = {
    "train": {
        "type": "object",
        "properties": {
            "data": DATA_SCHEMA,
            "train": TRAIN_SCHEMA,
            "kfold": {"type": ["integer", "null"], "minimum": 2},
            "tune_lambda": {"type": "boolean"},
            "out": _OUT,
        },
        "required": ["data"],
        "additionalProperties": False,
    },
    "recalibrate": {
        "type": "object",
        "properties": {
            "models": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "fold_plan": {"type": ["string", "null"]},
            "data": DATA_SCHEMA,
            "alpha": {"type": ["number", "null"]},
            "levels": _NUM_LIST,
            "regions": {"type": "array", "items": {"type": "string"}},
            "out": _OUT,
        },
        "required": ["models", "data"],
        "additionalProperties": False,
    },
    "predict": {
        "type": "object",
        "properties": {
            "model": {"type": "string"},
            "input": {"type": "string"},
            "features": {"type": ["array", "null"], "items": {"type": "string"}},
            "alpha": {"type": ["number", "null"]},
            "out": _OUT,
        },
        "required": ["model", "input"],
        "additionalProperties": False,
    },
    "simulate": {
        "type": "object",
        "properties": {
            "panel": {"enum": list(PANELS)},
            "simulation": SIM_SCHEMA,
            "n_jobs": _INT,
            "out": _OUT,
        },
        "additionalProperties": False,
    },
}


def load_config(path, command: str) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        jsonschema.validate(doc, SCHEMAS[command])
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {err.message}") from None
    doc["_base"] = str(path.resolve().parent)
    return doc


def _resolve(doc: dict, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(doc["_base"]) / q


# -------------------------------------------------------------------- file io

def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def rows_to_csv(rows: list[dict], fields: list[str] | None = None) -> str:
    if fields is None:
        fields = []
        for r in rows:
            fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    return buf.getvalue()


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n"


def load_dataset(doc: dict, spec: dict) -> Dataset:
    if "generator" in spec:
        return GENERATORS[spec["generator"]](spec["n"], spec.get("seed", 0))
    try:
        return load_csv(
            _resolve(doc, spec["csv"]), spec.get("features"), spec["outcome"],
            spec.get("outcome_kind", "real"),
        )
    except (OSError, CsvError) as err:
        raise ConfigError(str(err)) from None


# ---------------------------------------------------------------- region parse

_CLAUSE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(<=|>=|<|>)\s*([-+0-9.eE]+)\s*$")
_OPS = {"<": np.less, "<=": np.less_equal, ">": np.greater, ">=": np.greater_equal}


def parse_region(expr: str, feature_names: list[str]):
    """``"x1>0 & x2<=1.5"`` -> function mapping a raw feature matrix to a boolean mask."""
    clauses = []
    for part in re.split(r"&|,|\band\b", expr):
        m = _CLAUSE.match(part)
        if not m:
            raise ConfigError(f"cannot parse region clause {part.strip()!r} in {expr!r}")
        name, op, val = m.groups()
        if name not in feature_names:
            raise ConfigError(f"region {expr!r} refers to unknown feature {name!r}")
        try:
            clauses.append((feature_names.index(name), _OPS[op], float(val)))
        except ValueError:
            raise ConfigError(f"bad number in region clause {part.strip()!r}") from None

    def mask(X):
        out = np.ones(X.shape[0], dtype=bool)
        for j, op, v in clauses:
            out &= op(X[:, j], v)
        return out

    return mask


# -------------------------------------------------------------------- commands

def cmd_train(doc: dict, out: Path) -> None:
    ds = load_dataset(doc, doc["data"])
    cfg = TrainConfig.from_dict(doc.get("train", {}))
    if doc.get("tune_lambda"):
        lam, scores = tune_lambda(ds, cfg)
        cfg = replace(cfg, hyper=replace(cfg.hyper, lam=lam))
        write_atomic(out / "lambda_cv.csv", rows_to_csv(
            [{"lambda": k, "cv_score": v} for k, v in scores.items()]))
    kfold = doc.get("kfold")
    fields = ["epoch", "objective", "data_term", "penalty_term", "mean_psi"]
    if kfold:
        cfg = replace(cfg, K=kfold)
        metrics = [[] for _ in range(kfold)]
        models, plan = kfold_train(ds, cfg, metrics=metrics)
        for k, (model, met) in enumerate(zip(models, metrics)):
            write_atomic(out / f"model_{k}.json", model.to_json() + "\n")
            write_atomic(out / f"metrics_{k}.csv", rows_to_csv(met, fields))
        write_atomic(out / "fold_plan.json", _json(plan.to_dict()))
    else:
        metrics = []
        model = train_ulm(ds, cfg, metrics)
        write_atomic(out / "model.json", model.to_json() + "\n")
        write_atomic(out / "metrics.csv", rows_to_csv(metrics, fields))
    write_atomic(out / "train_config.json", _json(cfg.to_dict()))


def _load_model(path: Path) -> SelectiveModel:
    try:
        return SelectiveModel.from_json(path.read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError) as err:
        raise ConfigError(f"cannot load model {path}: {err}") from None


def cmd_recalibrate(doc: dict, out: Path) -> None:
    models = [_load_model(_resolve(doc, p)) for p in doc["models"]]
    ds = load_dataset(doc, doc["data"])
    alpha = doc.get("alpha")
    levels = doc.get("levels", [0.95])
    regions = doc.get("regions", [])
    plan = None
    if len(models) > 1:
        if not doc.get("fold_plan"):
            raise ConfigError("several models need a fold_plan")
        plan = FoldPlan.from_dict(json.loads(_resolve(doc, doc["fold_plan"]).read_text()))
        if plan.assignment.size != ds.n:
            raise ConfigError("fold plan does not match the validation data")
    for m in models:
        if m.preprocess is None and m.input_dim != ds.X.shape[1]:
            raise ConfigError(f"model expects {m.input_dim} features, data has {ds.X.shape[1]}")
    records = build_records(models if plan is not None else models[0], ds.X, ds.y, plan, alpha)

    report: dict = {"levels": levels, "K": len(models)}
    csv_rows = []

    def add_row(scope, est):
        row = {"scope": scope, "theta": est.theta, "sigma": est.sigma, "n_v": est.n_v, "K": est.K}
        for lvl in levels:
            lo, hi = est.ci(lvl)
            row[f"ci{lvl:g}_lower"], row[f"ci{lvl:g}_upper"] = lo, hi
        csv_rows.append(row)

    if plan is None:
        est = recalibrate_single(records)
        report["estimate"] = est.to_dict(levels)
        add_row("model", est)
    else:
        indiv = [recalibrate_single(r) for r in records]
        agg = recalibrate_aggregate(records)
        report["individual"] = [e.to_dict(levels) for e in indiv]
        report["aggregate"] = agg.to_dict(levels)
        for k, e in enumerate(indiv):
            add_row(f"model_{k}", e)
        add_row("aggregate", agg)

    local = []
    for expr in regions:
        mask_fn = parse_region(expr, ds.feature_names)
        if plan is None:
            est = local_coverage(records, mask_fn(ds.X))
        else:
            flags = [mask_fn(ds.X[plan.validation(k)]) for k in range(plan.K)]
            est = local_coverage(records, flags)
        local.append({"region": expr, "estimate": est.to_dict(levels)})
        add_row(f"region:{expr}", est)
    if local:
        report["local"] = local
    write_atomic(out / "coverage_report.json", _json(report))
    write_atomic(out / "coverage_report.csv", rows_to_csv(csv_rows))


def cmd_predict(doc: dict, out: Path) -> None:
    model = _load_model(_resolve(doc, doc["model"]))
    path = _resolve(doc, doc["input"])
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(str(err)) from None
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader, [])]
    if not header:
        raise ConfigError(f"{path}: empty file")
    features = doc.get("features") or header
    missing = [f for f in features if f not in header]
    if missing:
        raise ConfigError(f"{path}: missing columns {missing}")
    idx = [header.index(f) for f in features]
    raw = []
    for rowno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            raw.append([float(row[j]) for j in idx])
        except (ValueError, IndexError):
            raise ConfigError(f"{path}: row {rowno} has a missing or non-numeric feature") from None
    X_raw = np.array(raw, dtype=np.float64).reshape(-1, len(features))
    expected = model.preprocess.mean.size if model.preprocess is not None else model.input_dim
    if X_raw.shape[1] != expected:
        raise ConfigError(f"model expects {expected} features, input has {X_raw.shape[1]}")
    X = model.prepare(X_raw)
    alpha = doc.get("alpha")
    psi = model.accept_prob(X)
    unc = model.uncertainty(X)
    rows = []
    if model.kind == "categorical":
        for i in range(X.shape[0]):
            s = model.prediction_set(X[i], alpha)
            rows.append({"row": i, "accept_prob": psi[i], "accept": int(psi[i] >= 0.5),
                         "labels": ";".join(str(v) for v in s.labels), "uncertainty": unc[i]})
        fields = ["row", "accept_prob", "accept", "labels", "uncertainty"]
    else:
        lo, hi = model.interval_bounds(X, alpha)
        for i in range(X.shape[0]):
            rows.append({"row": i, "accept_prob": psi[i], "accept": int(psi[i] >= 0.5),
                         "lower": lo[i], "upper": hi[i], "uncertainty": unc[i]})
        fields = ["row", "accept_prob", "accept", "lower", "upper", "uncertainty"]
    write_atomic(out / "predictions.csv", rows_to_csv(rows, fields))


def cmd_simulate(doc: dict, out: Path) -> None:
    panel = doc.get("panel")
    if panel is None:
        raise ConfigError("no panel given (config 'panel' or --panel)")
    cfg = SimulationConfig.from_dict(doc.get("simulation", {}))
    rows = run_panel(panel, cfg, n_jobs=doc.get("n_jobs", 1))
    write_atomic(out / f"panel_{panel}.csv", rows_to_csv(rows))
    if panel in "DEF":
        summary = summarize_coverage(rows)
    else:
        key = {"A": "delta", "B": "lam", "C": "delta"}[panel]
        summary = {}
        for setting in sorted({r[key] for r in rows}):
            rr = [r for r in rows if r[key] == setting]
            entry = {"agreement": float(np.mean([r["agree"] for r in rr])),
                     "accept_area": float(np.mean([r["accept"] for r in rr]))}
            if panel == "C":
                inside = [r["accept_prob"] for r in rr if r["inside"]]
                outside = [r["accept_prob"] for r in rr if not r["inside"]]
                entry["mean_accept_inside"] = float(np.mean(inside))
                entry["mean_accept_outside"] = float(np.mean(outside))
            summary[f"{key}={setting:g}"] = entry
    write_atomic(out / f"panel_{panel}_summary.json", _json(summary))


def dump_data(doc: dict, out: Path) -> None:
    ds = load_dataset(doc, doc["data"])
    write_atomic(out / "data.csv", dataset_to_csv(ds))


COMMANDS = {
    "train": cmd_train,
    "recalibrate": cmd_recalibrate,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ulmguards", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (default: config 'out' or '.')")
    p.add_argument("--kfold", type=int, help="train K cross-fitted models (train)")
    p.add_argument("--region", action="append", default=[],
                   help="local-coverage region such as 'x1>0 & x2<1' (recalibrate, repeatable)")
    p.add_argument("--panel", choices=PANELS, help="simulation panel (simulate)")
    p.add_argument("--dump-data", action="store_true",
                   help="also write the configured dataset to data.csv (train)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        doc = load_config(args.config, args.command)
        if args.seed is not None:
            if args.command == "train":
                doc.setdefault("train", {})["seed"] = args.seed
            elif args.command == "simulate":
                doc.setdefault("simulation", {})["seed"] = args.seed
        if args.kfold is not None:
            if args.kfold < 2:
                raise ConfigError("--kfold must be >= 2")
            doc["kfold"] = args.kfold
        if args.region:
            doc["regions"] = doc.get("regions", []) + args.region
        if args.panel:
            doc["panel"] = args.panel
        out = Path(args.out) if args.out else _resolve(doc, doc.get("out", "."))
        if args.dump_data and "data" in doc:
            dump_data(doc, out)
        COMMANDS[args.command](doc, out)
    except (ConfigError, TypeError) as err:
        print(f"ulmguards: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except RecalibrationError as err:
        print(f"ulmguards: recalibration degenerate: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (TrainingDiverged, FloatingPointError) as err:
        print(f"ulmguards: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        print(f"ulmguards: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
