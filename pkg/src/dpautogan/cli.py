"""Command-line entry point: ``train``, ``synthesize``, ``evaluate``, ``account``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Set ``DPAUTOGAN_LOG`` (e.g. ``INFO``, ``DEBUG``) to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .accountant import account_phases
from .data import DataError, Schema, SchemaError, infer_schema_unsafe, load_csv, split, write_csv
from .metrics import ALL_METRICS, evaluate, validate_report
from .nn import NumericalError
from .presets import PRESETS, preset
from .trainer import SEED_NAMES, ModelFormatError, TrainPlan, generate, load_model, save_model, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dpautogan")


class ConfigError(Exception):
    """Invalid configuration; ``pointer`` is a JSON pointer into the config document."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _need(d: dict, key: str, pointer: str):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"{pointer}/{key}", "required field is missing")
    return d[key]


def _path(base: Path, value, pointer: str, must_exist: bool = True) -> Path:
    if not isinstance(value, str):
        raise ConfigError(pointer, "expected a file path")
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise ConfigError(pointer, f"file not found: {p}")
    return p


# --- train ----------------------------------------------------------------------------

def load_config(path: Path) -> dict:
    if not path.exists():
        raise ConfigError("", f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("", f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("", "config must be a JSON object")
    return cfg


def _resolve_plan(cfg: dict, n_train: int) -> TrainPlan:
    seeds = {k: i for i, k in enumerate(SEED_NAMES)}
    given = cfg.get("seeds", {})
    if not isinstance(given, dict) or any(not isinstance(v, int) for v in given.values()):
        raise ConfigError("/seeds", "seeds must map names to integers")
    unknown = set(given) - set(SEED_NAMES)
    if unknown:
        raise ConfigError("/seeds", f"unknown seed names {sorted(unknown)}")
    seeds.update(given)
    delta = cfg.get("delta", 1e-5)
    if not isinstance(delta, (int, float)) or not 0 < delta < 1:
        raise ConfigError("/delta", "delta must be a number in (0, 1)")
    if "preset" in cfg:
        name = cfg["preset"]
        if name not in PRESETS:
            raise ConfigError("/preset", f"unknown preset {name!r}; choose from {list(PRESETS)}")
        plan = preset(name, n_train=n_train, seeds=seeds, delta=float(delta))
        if "log_every" in cfg:
            plan = TrainPlan(plan.autoencoder, plan.gan, plan.delta, plan.seeds, plan.preset,
                             int(cfg["log_every"]), plan.checkpoint_every)
        return plan
    if "plan" not in cfg:
        raise ConfigError("/plan", "either 'preset' or 'plan' is required")
    doc = dict(cfg["plan"])
    doc.setdefault("seeds", seeds)
    doc.setdefault("delta", delta)
    try:
        return TrainPlan.from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError("/plan", f"invalid plan: {e}") from None


def cmd_train(args) -> int:
    cfg_path = Path(args.config).resolve()
    cfg = load_config(cfg_path)
    base = cfg_path.parent
    data = _need(cfg, "data", "")
    csv_path = _path(base, _need(data, "csv", "/data"), "/data/csv")
    if args.infer_schema_unsafe and "schema" not in data:
        schema = infer_schema_unsafe(csv_path, categorical=data.get("categorical"),
                                     drop=data.get("drop", ()))
    else:
        schema_path = _path(base, _need(data, "schema", "/data"), "/data/schema")
        try:
            schema = Schema.load(schema_path)
        except SchemaError as e:
            raise ConfigError("/data/schema", str(e)) from None
    out = _need(cfg, "output", "")
    model_path = _path(base, _need(out, "model", "/output"), "/output/model", must_exist=False)
    manifest_path = _path(base, out.get("manifest", str(model_path) + ".manifest.json"),
                          "/output/manifest", must_exist=False)
    log_path = _path(base, out.get("log", str(model_path) + ".log.jsonl"), "/output/log",
                     must_exist=False)

    table = load_csv(csv_path, schema)
    sp = data.get("split")
    train_table, test_table = table, None
    seeds = cfg.get("seeds", {})
    if sp is not None:
        frac = _need(sp, "train_fraction", "/data/split")
        if not isinstance(frac, (int, float)) or not 0 < frac < 1:
            raise ConfigError("/data/split/train_fraction", "must lie in (0, 1)")
        train_table, test_table = split(table, float(frac), seed=int(seeds.get("data", 0)),
                                        preserve_order=bool(sp.get("preserve_order", False)))
    plan = _resolve_plan(cfg, train_table.n_rows)

    model_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log_fh:
        def log_fn(event: dict):
            line = json.dumps(event, sort_keys=True)
            log_fh.write(line + "\n")
            log.info(line)
        ckpt = out.get("checkpoint_dir")
        ckpt = _path(base, ckpt, "/output/checkpoint_dir", must_exist=False) if ckpt else None
        with np.errstate(invalid="raise"):
            model, spend = train(train_table, plan, schema, log_fn=log_fn, checkpoint_dir=ckpt)
    save_model(model, model_path)
    digest = hashlib.sha256(model_path.read_bytes()).hexdigest()
    manifest = dict(model.manifest, privacy=spend.to_dict(), schema=schema.to_dict(),
                    model_sha256=digest)
    _dump(manifest, manifest_path)
    if "privacy_report" in out:
        _dump({"epsilon": spend.to_dict()["epsilon"], "delta": spend.delta,
               "optimal_order": spend.optimal_order, "preset": plan.preset},
              _path(base, out["privacy_report"], "/output/privacy_report", must_exist=False))
    for key, tab in (("train_csv", train_table), ("test_csv", test_table)):
        if key in out and tab is not None:
            write_csv(tab, _path(base, out[key], f"/output/{key}", must_exist=False))
    eps = spend.to_dict()["epsilon"]
    print(json.dumps({"model": str(model_path), "epsilon": eps, "delta": spend.delta}))
    return EXIT_OK


# --- synthesize / evaluate / account --------------------------------------------------

def cmd_synthesize(args) -> int:
    path = Path(args.model)
    if not path.exists():
        raise ConfigError("--model", f"file not found: {path}")
    if args.count < 0:
        raise ConfigError("--count", "count must be non-negative")
    model = load_model(path)
    rows = generate(model, args.count, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out)
    return EXIT_OK


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in r])


def cmd_evaluate(args) -> int:
    paths = {"--schema": args.schema, "--real-train": args.real_train, "--real-test": args.real_test,
             "--synth": args.synth}
    for flag, p in paths.items():
        if not Path(p).exists():
            raise ConfigError(flag, f"file not found: {p}")
    try:
        schema = Schema.load(args.schema)
    except SchemaError as e:
        raise ConfigError("--schema", str(e)) from None
    R, T, S = (load_csv(p, schema) for p in (args.real_train, args.real_test, args.synth))
    metrics = args.metrics or [m for m in ALL_METRICS if m != "label" or args.label]
    if "label" in metrics and not args.label:
        raise ConfigError("--label", "the label metric needs --label COLUMN")
    if args.label and args.label not in schema.names:
        raise ConfigError("--label", f"unknown column {args.label!r}")
    report, tables = evaluate(R, T, S, metrics, seed=args.seed, label_column=args.label,
                              kway_repeats=args.kway_repeats,
                              provenance={"real_train": Path(args.real_train).name,
                                          "real_test": Path(args.real_test).name,
                                          "synth": Path(args.synth).name})
    validate_report(report)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.tables_dir:
        d = Path(args.tables_dir)
        d.mkdir(parents=True, exist_ok=True)
        for name, (header, rows) in tables.items():
            _write_table(d / f"{name}.csv", header, rows)
    return EXIT_OK


def cmd_account(args) -> int:
    path = Path(args.phases)
    if not path.exists():
        raise ConfigError("--phases", f"file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("--phases", f"not valid JSON: {e}") from None
    phases = doc["phases"] if isinstance(doc, dict) and "phases" in doc else doc
    if not isinstance(phases, list) or not phases:
        raise ConfigError("/phases", "expected a non-empty list of phases")
    for i, ph in enumerate(phases):
        for key in ("q", "psi", "T"):
            if not isinstance(ph, dict) or key not in ph:
                raise ConfigError(f"/phases/{i}/{key}", "required field is missing")
        if not 0 < float(ph["q"]) <= 1:
            raise ConfigError(f"/phases/{i}/q", "must lie in (0, 1]")
        if float(ph["psi"]) <= 0:
            raise ConfigError(f"/phases/{i}/psi", "non-private phases cannot be accounted")
        if int(ph["T"]) < 0:
            raise ConfigError(f"/phases/{i}/T", "must be non-negative")
    if not 0 < args.delta < 1:
        raise ConfigError("--delta", "must lie in (0, 1)")
    report = account_phases(phases, args.delta)
    print(json.dumps(report, indent=2, sort_keys=True))
    per = " + ".join(f"{p['eps']:.4f}" for p in report["per_phase"])
    print(f"combined eps = {report['combined']['eps']:.4f} (order {report['combined']['alpha_star']})"
          f" | separate: {per} = {report['naive_sum_eps']:.4f}"
          f" | savings {100 * report['savings']:.1f}%", file=sys.stderr)
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpautogan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--infer-schema-unsafe", action="store_true",
                   help="derive bounds and categories from the data itself (leaks private information)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", help="sample synthetic rows from a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="score synthetic data against real data")
    e.add_argument("--real-train", required=True)
    e.add_argument("--real-test", required=True)
    e.add_argument("--synth", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--metrics", nargs="+", choices=ALL_METRICS)
    e.add_argument("--label", help="column predicted by the random-forest label metric")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--kway-repeats", type=int, default=100)
    e.add_argument("--out", help="report path (default: stdout)")
    e.add_argument("--tables-dir", help="directory for plot-ready CSV tables")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("account", help="privacy cost of a sequence of DP-SGD phases")
    a.add_argument("--phases", required=True, help="JSON list of {q, psi, T, r}")
    a.add_argument("--delta", type=float, default=1e-5)
    a.set_defaults(func=cmd_account)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("DPAUTOGAN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ModelFormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
