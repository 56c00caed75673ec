"""Command-line interface: ``dynsurv {fit,predict,validate,simulate,bench}``.

Settings come from a YAML file (``--config``) and are overridden by flags.
Relative paths in the file are resolved against the file's directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import warnings
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
import scipy
import yaml

from dynsurv import __version__
from dynsurv._backend import BACKEND
from dynsurv.cox import PenaltySpec
from dynsurv.data import Schema, apply_landmark, load_dataset, log_name, log_transform
from dynsurv.lmm import fits_to_frame
from dynsurv.metrics import METRICS
from dynsurv.pipeline import PipelineConfig, fit_prc, load_model, save_model
from dynsurv.simulate import SimConfig, simulate_prclmm_data

log = logging.getLogger("dynsurv")
COMMANDS = ("fit", "predict", "validate", "simulate", "bench")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    survival: str | None = None
    longitudinal: str | None = None
    out: str | None = None
    model: str | None = None
    new_longitudinal: str | None = None
    new_baseline: str | None = None
    schema: dict = field(default_factory=dict)
    landmark: float | None = None
    y_names: list | None = None
    log_transform: list = field(default_factory=list)
    fixed_terms: list = field(default_factory=list)
    random_terms: list = field(default_factory=list)
    baseline: list | None = None
    penalty: dict = field(default_factory=lambda: {"kind": "ridge"})
    standardize: bool = True
    times: list = field(default_factory=list)
    metrics: list = field(default_factory=lambda: ["tdauc", "c", "brier"])
    n_boots: int = 0
    seed: int = 0
    workers: int = 1
    simulate: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def penalty_spec(self):
        return PenaltySpec(**{"seed": self.seed, **self.penalty})

    def pipeline(self):
        y = self.y_names
        if y is not None:
            renamed = {v: log_name(v) for v in self.log_transform}
            y = [renamed.get(v, v) for v in y]
        return PipelineConfig(
            y_names=y, fixed_terms=self.fixed_terms, random_terms=self.random_terms,
            baseline=self.baseline, penalty=self.penalty_spec(), standardize=self.standardize,
        )


_TYPES = {
    "survival": (str,), "longitudinal": (str,), "out": (str,), "model": (str,),
    "new_longitudinal": (str,), "new_baseline": (str,),
    "schema": (dict,), "landmark": (int, float), "y_names": (list,), "log_transform": (list,),
    "fixed_terms": (list,), "random_terms": (list,), "baseline": (list,),
    "penalty": (str, dict), "standardize": (bool,), "times": (list,), "metrics": (list,),
    "n_boots": (int,), "seed": (int,), "workers": (int,), "simulate": (dict,), "bench": (dict,),
}
_PATH_KEYS = ("survival", "longitudinal", "out", "model", "new_longitudinal", "new_baseline")
_BENCH_KEYS = {"axis", "grid", "reps", "n", "p", "B", "cores", "warmup"}


def _check_type(key, value):
    allowed = _TYPES[key]
    ok = isinstance(value, allowed) and not (isinstance(value, bool) and bool not in allowed)
    if value is not None and not ok:
        names = " or ".join(t.__name__ for t in allowed)
        raise ConfigError(f"{key}: expected {names}, got {type(value).__name__} {value!r}")


def parse_config(text=None, base_dir=".", overrides=None, command="fit"):
    """Resolve a YAML config plus flag overrides into a validated RunConfig."""
    raw = yaml.safe_load(text) if text else {}
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    raw = {k.replace("-", "_"): v for k, v in raw.items()}
    for key in raw:
        if key not in _TYPES:
            raise ConfigError(f"{key}: unknown key")
    for key, value in raw.items():
        _check_type(key, value)
    for key in _PATH_KEYS:
        if raw.get(key) is not None and not os.path.isabs(raw[key]):
            raw[key] = os.path.normpath(os.path.join(base_dir, raw[key]))
    for key, value in (overrides or {}).items():
        if value is not None:
            _check_type(key, value)
            raw[key] = value
    if isinstance(raw.get("penalty"), str):
        raw["penalty"] = {"kind": raw["penalty"]}
    cfg = RunConfig(**raw)
    _validate(cfg, command)
    return cfg


def _validate(cfg, command):
    if cfg.out is None:
        raise ConfigError("out: missing required key")
    if command in ("fit", "predict", "validate"):
        for key in ("survival", "longitudinal", "landmark"):
            if getattr(cfg, key) is None:
                raise ConfigError(f"{key}: missing required key")
        for key in ("survival", "longitudinal"):
            if not os.path.exists(getattr(cfg, key)):
                raise ConfigError(f"{key}: file not found: {getattr(cfg, key)}")
        if not cfg.landmark > 0:
            raise ConfigError(f"landmark: must be positive, got {cfg.landmark}")
    unknown = set(cfg.schema) - {f.name for f in fields(Schema)}
    if unknown:
        raise ConfigError(f"schema.{sorted(unknown)[0]}: unknown key")
    try:
        cfg.times = [float(t) for t in cfg.times]
    except (TypeError, ValueError):
        raise ConfigError(f"times: expected numbers, got {cfg.times!r}") from None
    if cfg.landmark is not None:
        early = [t for t in cfg.times if t < cfg.landmark]
        if early:
            raise ConfigError(f"times: evaluation time {early[0]:g} precedes the landmark {cfg.landmark:g}")
    bad = [m for m in cfg.metrics if m not in METRICS]
    if bad:
        raise ConfigError(f"metrics: unknown metric {bad[0]!r}; choose from {', '.join(METRICS)}")
    if cfg.n_boots < 0:
        raise ConfigError(f"n_boots: must be >= 0, got {cfg.n_boots}")
    if cfg.workers < 1:
        raise ConfigError(f"workers: must be >= 1, got {cfg.workers}")
    pen_keys = {f.name for f in fields(PenaltySpec)} - {"seed"}
    unknown = set(cfg.penalty) - pen_keys
    if unknown:
        raise ConfigError(f"penalty.{sorted(unknown)[0]}: unknown key")
    try:
        cfg.penalty_spec()
    except ValueError as exc:
        raise ConfigError(f"penalty: {exc}") from None
    unknown = set(cfg.simulate) - {f.name for f in fields(SimConfig)}
    if unknown:
        raise ConfigError(f"simulate.{sorted(unknown)[0]}: unknown key")
    unknown = set(cfg.bench) - _BENCH_KEYS
    if unknown:
        raise ConfigError(f"bench.{sorted(unknown)[0]}: unknown key")
    if command in ("predict", "validate") and not cfg.times:
        raise ConfigError("times: missing required key")
    if command == "bench" and ("axis" not in cfg.bench or "grid" not in cfg.bench):
        raise ConfigError("bench.axis: missing required key (bench needs axis and grid)")
    if (cfg.new_longitudinal is None) != (cfg.new_baseline is None):
        raise ConfigError("new_longitudinal/new_baseline: both files are needed for new-subject prediction")


# commands -------------------------------------------------------------------

def _load(cfg):
    schema = Schema.from_dict(cfg.schema)
    ds = load_dataset(cfg.survival, cfg.longitudinal, schema)
    ds = apply_landmark(ds, cfg.landmark)
    if cfg.log_transform:
        ds = log_transform(ds, cfg.log_transform)
    return ds


def _csv(frame, path):
    frame.to_csv(path, index=False, float_format="%.17g", na_rep="")
    return path


def _model_dir(cfg):
    return cfg.model or os.path.join(cfg.out, "model")


def cmd_fit(cfg):
    ds = _load(cfg)
    model = fit_prc(ds, cfg.pipeline(), workers=cfg.workers)
    outputs = []
    save_model(model, _model_dir(cfg))
    outputs.append(_model_dir(cfg))
    outputs.append(_csv(model.cox_fit.coefficients(), os.path.join(cfg.out, "cox_coefficients.csv")))
    outputs.append(_csv(fits_to_frame(model.lmm_fits), os.path.join(cfg.out, "lmm_summary.csv")))
    outputs.append(_csv(model.cox_fit.baseline_hazard.to_frame("cumhaz"), os.path.join(cfg.out, "baseline_hazard.csv")))
    if cfg.times:
        outputs.append(_csv(model.predict_frame(ds, cfg.times), os.path.join(cfg.out, "predictions.csv")))
    return outputs


def _new_subject_tables(cfg, model):
    schema = Schema.from_dict(cfg.schema)
    long = pd.read_csv(cfg.new_longitudinal, dtype={schema.id: str}, float_precision="round_trip")
    base = pd.read_csv(cfg.new_baseline, dtype={schema.id: str}, float_precision="round_trip")
    long = long.rename(columns={schema.id: "id", schema.fuptime: "fuptime"})
    base = base.rename(columns={schema.id: "id"})
    long = long[long["fuptime"] <= cfg.landmark]
    for var in cfg.log_transform:
        if var not in long.columns:
            raise KeyError(f"new longitudinal table lacks {var!r}")
        vals = long[var].to_numpy(dtype=float)
        if np.any(vals[~np.isnan(vals)] <= 0):
            raise ValueError(f"nonpositive value of {var!r} in the new longitudinal table")
        long[log_name(var)] = np.log(vals)
    return long, base


def cmd_predict(cfg):
    model = load_model(_model_dir(cfg))
    path = os.path.join(cfg.out, "predictions.csv")
    if cfg.new_longitudinal:
        long, base = _new_subject_tables(cfg, model)
        frame = model.predict_new(long, base, cfg.times)
    else:
        frame = model.predict_frame(_load(cfg), cfg.times)
    return [_csv(frame, path)]


def cmd_validate(cfg):
    from dynsurv.validation import run_cbocp

    ds = _load(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = run_cbocp(
            ds, cfg.pipeline(), cfg.metrics, cfg.times, n_boots=cfg.n_boots, seed=cfg.seed, workers=cfg.workers,
        )
    for w in caught:
        log.warning("%s", w.message)
    path = os.path.join(cfg.out, "performance.csv")
    report.to_csv(path)
    naive = report.table[["metric", "pred_time", "naive"]].rename(columns={"naive": "value"})
    return [path, _csv(naive, os.path.join(cfg.out, "metrics.csv"))]


def cmd_simulate(cfg):
    sim = SimConfig(**{"seed": cfg.seed, **_tuples(cfg.simulate)})
    ds, truth = simulate_prclmm_data(sim)
    surv_path = os.path.join(cfg.out, "survival.csv")
    long_path = os.path.join(cfg.out, "longitudinal.csv")
    from dynsurv.data import write_dataset

    write_dataset(ds, surv_path, long_path)
    re = pd.DataFrame({"id": ds.ids})
    for s in range(sim.p):
        re[f"y{s + 1}_u_int"] = truth.u[:, s, 0]
        re[f"y{s + 1}_u_slope"] = truth.u[:, s, 1]
    return [surv_path, long_path, _csv(re, os.path.join(cfg.out, "true_random_effects.csv"))]


def _tuples(d):
    return {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v for k, v in d.items()}


def cmd_bench(cfg):
    from dynsurv.bench import BenchSettings, environment, run_bench

    b = dict(cfg.bench)
    settings = BenchSettings(
        n=b.get("n", 200), p=b.get("p", 10), B=b.get("B", 50), cores=b.get("cores", cfg.workers),
        eval_times=tuple(cfg.times) or BenchSettings.eval_times, metrics=tuple(cfg.metrics), seed=cfg.seed,
    )
    path = os.path.join(cfg.out, "bench.csv")
    run_bench(b["axis"], b["grid"], reps=b.get("reps", 1), settings=settings,
              sim=SimConfig(**_tuples(cfg.simulate)), warmup=b.get("warmup", True), out=path)
    with open(os.path.join(cfg.out, "bench_environment.json"), "w") as fh:
        json.dump(environment(), fh, indent=2)
    return [path]


HANDLERS = {"fit": cmd_fit, "predict": cmd_predict, "validate": cmd_validate,
            "simulate": cmd_simulate, "bench": cmd_bench}


def execute(command, cfg):
    """Run one subcommand; returns the list of written artifacts."""
    os.makedirs(cfg.out, exist_ok=True)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True, default=str))
    outputs = HANDLERS[command](cfg)
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "backend": BACKEND,
        "versions": {
            "dynsurv": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__,
        },
        "outputs": outputs,
    }
    with open(os.path.join(cfg.out, f"run_manifest_{command}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)
    return outputs


def _csv_list(kind):
    def conv(text):
        items = [s.strip() for s in text.split(",") if s.strip()]
        return [float(s) for s in items] if kind is float else items
    return conv


def build_parser():
    parser = argparse.ArgumentParser(prog="dynsurv", description="Landmark dynamic survival prediction.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--survival")
        p.add_argument("--longitudinal")
        p.add_argument("--landmark", type=float)
        p.add_argument("--penalty", choices=["ridge", "lasso", "elnet"])
        p.add_argument("--n-boots", type=int, dest="n_boots")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--times", type=_csv_list(float))
        p.add_argument("--metric", type=_csv_list(str), dest="metrics")
        p.add_argument("--out")
        p.add_argument("--model", help="model bundle directory (default: <out>/model)")
        p.add_argument("--new-longitudinal", dest="new_longitudinal")
        p.add_argument("--new-baseline", dest="new_baseline")
        p.add_argument("-q", "--quiet", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    try:
        text, base = None, "."
        if args.config:
            with open(args.config) as fh:
                text = fh.read()
            base = os.path.dirname(os.path.abspath(args.config))
        over = {k: getattr(args, k) for k in (
            "survival", "longitudinal", "landmark", "n_boots", "workers", "seed", "times", "metrics",
            "out", "model", "new_longitudinal", "new_baseline")}
        for k in _PATH_KEYS:
            if over.get(k):
                over[k] = os.path.abspath(over[k])
        cfg = parse_config(text, base, over, args.command)
        if args.penalty:
            cfg.penalty = {**cfg.penalty, "kind": args.penalty}
            _validate(cfg, args.command)
        outputs = execute(args.command, cfg)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for path in outputs:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
