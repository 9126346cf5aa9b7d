"""Command-line front end.

Settings come from built-in defaults, then ``--config`` (a flat key=value
file), then ``--set key=value`` overrides, then the dedicated flags. Every
run writes the fully resolved settings to ``<out>/config.txt``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from functools import partial
from pathlib import Path

import numpy as np

from . import harness as hz
from .exceptions import ConfigError, DataError, MultiwayError, NumericalError
from .kernels_io import (Levels, TableSchema, align_kernel, load_kernel_matrix,
                         load_long_table, write_labeled_matrix, write_long_table)
from .missing import FitConfig, PartialSample, conditional_mean_impute

log = logging.getLogger("multiway")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4, 5

# key -> (parser, default); None defaults are filled per design or left unset
SETTINGS = {
    "seed": (int, "0"),
    "threads": (int, "1"),
    "format": (str, "csv"),
    "out": (str, "."),
    "design": (str, "example1"),
    "shape": ("ints", None),
    "n": ("ints", None),
    "missing": ("floats", None),
    "replications": (int, "30"),
    "p1": ("ints", None),
    "markers": (int, "500"),
    "lambda": (float, "0.5"),
    "sigma2": (float, "1"),
    "max_iterations": (int, "200"),
    "rel_tol": (float, "1e-6"),
    "estep": (str, "expected"),
    "data": (str, ""),
    "dims": ("names", ""),
    "value_column": (str, "value"),
    "sample_column": (str, "sample"),
    "missing_token": (str, "NA"),
    "delimiter": (str, "comma"),
    "mean": (str, "auto"),
    "mean_dims": ("names", ""),
    "traits": (str, ""),
    "holdout": ("floats", "0.1"),
    "init": (str, ""),
    "params": (str, ""),
}
PREFIXED = ("kernel.", "levels.", "lambda.")

DESIGN_DEFAULTS = {
    "example1": dict(shape="6,4,2", n="20,50,100", missing="0.4,0.3,0.2,0.1", p1="50,100,200"),
    "example4": dict(shape="6,2", n="1", missing="0.6,0.4,0.2,0.1", p1="50,100,200"),
    "markers": dict(shape="2,2,5", n="1", missing="0.1,0.6", p1="100"),
}


def _parse_value(key: str, text: str):
    kind = SETTINGS[key][0] if key in SETTINGS else str
    try:
        if kind == "ints":
            return tuple(int(x) for x in text.split(",") if x.strip())
        if kind == "floats":
            return tuple(float(x) for x in text.split(",") if x.strip())
        if kind == "names":
            return tuple(x.strip() for x in text.split(",") if x.strip())
        return kind(text)
    except ValueError:
        raise ConfigError(f"setting {key}={text!r} is not a valid {getattr(kind, '__name__', kind)}"
                          ) from None


class Settings(dict):
    """Raw string settings with typed access."""

    def get_typed(self, key):
        return _parse_value(key, self[key])


def _check_key(key: str):
    if key not in SETTINGS and not key.startswith(PREFIXED):
        raise ConfigError(f"unknown setting {key!r}")


def resolve_settings(args) -> Settings:
    raw = {}
    if args.config:
        try:
            raw.update(hz.read_key_values(args.config))
        except OSError as err:
            raise ConfigError(f"cannot read config file: {err}") from None
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    for key in ("seed", "out", "threads", "format"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = str(value)
    for key, value in vars(args).get("extra", {}).items():
        if value is not None:
            raw[key] = value
    for key in raw:
        _check_key(key)
    design = raw.get("design", SETTINGS["design"][1])
    if design not in DESIGN_DEFAULTS:
        raise ConfigError(f"unknown design {design!r}; choose from {sorted(DESIGN_DEFAULTS)}")
    out = Settings()
    for key, (_, default) in SETTINGS.items():
        if default is None:
            default = DESIGN_DEFAULTS[design][key]
        out[key] = default
    out.update(raw)
    for key in out:
        if key in SETTINGS:
            out.get_typed(key)
    if out["format"] not in ("csv", "svg"):
        raise ConfigError("format must be csv or svg")
    if out.get_typed("threads") < 1:
        raise ConfigError("threads must be at least 1")
    if out.get_typed("seed") < 0:
        raise ConfigError("seed must be non-negative")
    return out


def write_resolved(settings: Settings, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        for key in sorted(settings):
            fh.write(f"{key}={settings[key]}\n")


def fit_config(s: Settings) -> FitConfig:
    try:
        return FitConfig(max_iterations=s.get_typed("max_iterations"),
                         rel_tol=s.get_typed("rel_tol"), estep=s["estep"])
    except ValueError as err:
        raise ConfigError(str(err)) from None


def experiment_config(s: Settings) -> hz.ExperimentConfig:
    return hz.ExperimentConfig(
        design=s["design"], shape=s.get_typed("shape"), n=s.get_typed("n"),
        missing=s.get_typed("missing"), replications=s.get_typed("replications"),
        seed=s.get_typed("seed"), p1=s.get_typed("p1"), markers=s.get_typed("markers"),
        lam=s.get_typed("lambda"), sigma2=s.get_typed("sigma2"), fit=fit_config(s))


def _delimiter(s: Settings) -> str:
    return {"comma": ",", "tab": "\t", ",": ",", "\\t": "\t"}.get(s["delimiter"], s["delimiter"])


def _prefixed(s: Settings, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in s.items() if k.startswith(prefix)}


# ---------------------------------------------------------------- data and models


def load_data(s: Settings, level_files: dict | None = None):
    """Read the long table named by ``data`` and attach kernels.

    Kernel levels that never occur in the data are appended as all-missing
    slices so they receive predictions.
    """
    if not s["data"]:
        raise ConfigError("no data file given (use --data or data=...)")
    files = dict(_prefixed(s, "levels."))
    files.update(level_files or {})
    schema = TableSchema(dims=s.get_typed("dims") or None, value_column=s["value_column"],
                         sample_column=s["sample_column"], missing_token=s["missing_token"],
                         delimiter=_delimiter(s), level_files=files)
    data, levels = load_long_table(s["data"], schema)
    kernels = {}
    for name, path in _prefixed(s, "kernel.").items():
        try:
            k = levels.index(name)
        except KeyError as err:
            raise ConfigError(f"kernel given for {err.args[0]}") from None
        K, order = align_kernel(load_kernel_matrix(path, delimiter=_delimiter(s)),
                                levels.labels[k])
        extra = len(order) - data.shape[k]
        if extra:
            log.info("dimension %s: %d kernel level(s) absent from the data are predicted",
                     name, extra)
            pad = list(data.values.shape)
            pad[k + 1] = extra
            values = np.concatenate([data.values, np.full(pad, np.nan)], axis=k + 1)
            data = PartialSample(values, ~np.isnan(values))
            levels.labels[k] = order
        kernels[k] = K
    return data, levels, kernels


def model_spec(s: Settings, data: PartialSample, levels: Levels, kernels: dict) -> hz.ModelSpec:
    mean = s["mean"]
    dims = s.get_typed("mean_dims")
    if mean == "auto":
        mean = "saturated" if data.N > 1 else "additive"
    if mean == "saturated":
        flags = "saturated"
    elif mean == "additive":
        # by default the kernel dimensions are left to the random effect
        chosen = dims or tuple(n for k, n in enumerate(levels.names) if k not in kernels) \
            or tuple(levels.names)
        for d in chosen:
            if d not in levels.names:
                raise ConfigError(f"mean_dims names unknown dimension {d!r}")
        flags = tuple(n in chosen for n in levels.names)
    else:
        raise ConfigError("mean must be auto, saturated or additive")
    lambdas = {}
    for name, text in _prefixed(s, "lambda.").items():
        if name not in levels.names:
            raise ConfigError(f"lambda given for unknown dimension {name!r}")
        lambdas[levels.index(name)] = _parse_value("lambda", text)
    return hz.ModelSpec(kernels=kernels, mean=flags, lambdas=lambdas)


def _trait_axis(s: Settings, levels: Levels):
    if not s["traits"]:
        return None, None
    try:
        k = levels.index(s["traits"])
    except KeyError as err:
        raise ConfigError(f"traits names {err.args[0]}") from None
    return k, levels.labels[k]


# ---------------------------------------------------------------- commands


def cmd_simulate(s: Settings, out: Path) -> None:
    cfg = experiment_config(s)
    if cfg.design == "markers":
        ds = hz.marker_dataset(cfg)
        write_long_table(out / "data.csv", ds.complete, ds.levels, with_sample=False)
        write_labeled_matrix(out / "kernel.csv", ds.kernel, ds.levels.labels[0])
        hz.write_params(out / "truth", ds.levels, model=ds.truth,
                        info={"kind": "truth", "sigma2": hz.format_float(ds.sigma2),
                              f"lambda.{ds.levels.names[0]}": hz.format_float(ds.lam)})
        return
    job = partial(_simulate_replication, cfg, out)
    hz.run_replications(job, cfg.replications, s.get_typed("threads"))


def _levels_for(shape, names=None) -> Levels:
    names = names or [f"d{k + 1}" for k in range(len(shape))]
    return Levels(list(names), [[str(i + 1) for i in range(m)] for m in shape])


def _simulate_replication(cfg: hz.ExperimentConfig, out: Path, r: int):
    rep = out / f"rep_{r + 1:03d}"
    rep.mkdir(parents=True, exist_ok=True)
    if cfg.design == "example1":
        truth, X, U = hz.example1_draw(cfg, r)
        lv = _levels_for(cfg.shape)
        if r == 0:
            hz.write_params(out / "truth", lv, model=truth, info=dict(kind="truth"))
        lv.samples = [str(i + 1) for i in range(X.shape[0])]
        write_long_table(rep / "complete.csv", X, lv)
        for p in cfg.missing:
            write_long_table(rep / f"data_missing_{p:g}.csv", np.where(U >= p, X, np.nan), lv)
        return [], []
    for d in hz.example4_draws(cfg, r):
        sub = rep / f"p1_{d.p1}"
        sub.mkdir(exist_ok=True)
        lv = _levels_for(d.truth.shape, ["entity"] + [f"d{k + 2}" for k in range(len(cfg.shape))])
        lv.labels[0] = [f"E{i + 1:03d}" for i in range(d.p1)]
        write_labeled_matrix(sub / "kernel.csv", d.kernel, lv.labels[0])
        hz.write_params(sub / "truth", lv, model=d.truth,
                        info={"kind": "truth", "sigma2": hz.format_float(cfg.sigma2),
                              "lambda.entity": hz.format_float(cfg.lam)})
        write_long_table(sub / "complete.csv", d.X, lv, with_sample=False)
        for p in cfg.missing:
            write_long_table(sub / f"data_missing_{p:g}.csv", np.where(d.U >= p, d.X, np.nan),
                             lv, with_sample=False)
    return [], []


def cmd_fit(s: Settings, out: Path) -> None:
    init_dir = s["init"]
    params = hz.read_params(init_dir) if init_dir else None
    fixed = None
    if params is not None:
        fixed = {n: str(Path(init_dir) / f"levels_{hz._safe(n)}.txt") for n in params.levels.names}
    data, levels, kernels = load_data(s, fixed)
    spec = model_spec(s, data, levels, kernels)
    init = None
    if params is not None:
        if params.levels.labels != levels.labels or params.levels.names != levels.names:
            raise DataError("initial parameters do not match the data levels")
        init = params.model if spec.uses_flip_flop() else params.avspmm_init(spec)
    report = hz.fit_model(data, spec, fit_config(s), init=init)
    for w in report.warnings:
        log.warning(w)
    hz.write_params(out, levels, report)
    missing = ~data.mask
    write_long_table(out / "imputed.csv", report.imputed, levels, select=missing,
                     with_sample=levels.samples is not None)


def cmd_impute(s: Settings, out: Path) -> None:
    if not s["params"]:
        raise ConfigError("no parameter directory given (use --params or params=...)")
    params = hz.read_params(s["params"])
    fixed = {n: str(Path(s["params"]) / f"levels_{hz._safe(n)}.txt")
             for n in params.levels.names}
    s = Settings(s)
    s["dims"] = ",".join(params.levels.names)
    for key in [k for k in s if k.startswith("kernel.")]:
        del s[key]
    data, levels, _ = load_data(s, fixed)
    imputed = np.stack([conditional_mean_impute(v, m, params.model)
                        for v, m in zip(data.values, data.mask)])
    write_long_table(out / "imputed.csv", imputed, levels, select=~data.mask,
                     with_sample=levels.samples is not None)


def cmd_cv(s: Settings, out: Path) -> None:
    holdouts = s.get_typed("holdout")
    if not holdouts or any(not 0.0 < h < 1.0 for h in holdouts):
        raise ConfigError("holdout fractions must lie in (0, 1); nothing to score otherwise")
    reps = s.get_typed("replications")
    if reps < 1:
        raise ConfigError("replications must be at least 1")
    data, levels, kernels = load_data(s)
    if data.count_observed < 2:
        raise DataError("too few observed cells to hold out")
    spec = model_spec(s, data, levels, kernels)
    axis, labels = _trait_axis(s, levels)
    job = partial(hz.cv_replication, data, spec, holdouts, s.get_typed("seed"),
                  fit_cfg=fit_config(s), trait_axis=axis, trait_labels=labels)
    records, timings = hz.run_replications(job, reps, s.get_typed("threads"))
    hz.write_records(out / "metrics.csv", records)
    hz.write_records(out / "timing.csv", timings)


def cmd_experiment(s: Settings, out: Path) -> None:
    cfg = experiment_config(s)
    if cfg.design == "markers":
        ds = hz.marker_dataset(cfg)
        data = PartialSample(ds.complete[None], np.ones((1,) + ds.complete.shape, dtype=bool))
        flags = (False,) * (ds.complete.ndim - 1) + (True,)
        spec = hz.ModelSpec(kernels={0: ds.kernel}, mean=flags)
        job = partial(hz.cv_replication, data, spec, cfg.missing, cfg.seed, fit_cfg=cfg.fit,
                      trait_axis=ds.complete.ndim - 1, trait_labels=ds.levels.labels[-1])
    else:
        job = hz.design_job(cfg)
    records, timings = hz.run_replications(job, cfg.replications, s.get_typed("threads"))
    hz.write_records(out / "metrics.csv", records)
    hz.write_records(out / "timing.csv", timings)


def cmd_report(s: Settings, out: Path, tables) -> None:
    records = []
    for path in tables:
        records += hz.read_records(path)
    if not records:
        raise DataError("metrics tables hold no records")
    rows = hz.summarize(records)
    hz.write_summary(out / "summary.csv", rows)
    if s["format"] == "svg":
        try:
            hz.write_boxplots(out, rows)
        except ImportError:
            raise ConfigError("svg output needs matplotlib (pip install multiway[svg])") from None


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes for replications")
    common.add_argument("--format", choices=("csv", "svg"), help="report output format")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="multiway", description="Array-normal imputation and multiway mixed models.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write simulated designs and truth files")
    p = sub.add_parser("fit", parents=[common], help="fit a model to a long table")
    p.add_argument("--data")
    p.add_argument("--init", help="parameter directory to start from")
    p.add_argument("--kernel", action="append", metavar="DIM=PATH", default=[])
    p = sub.add_parser("impute", parents=[common], help="impute missing cells at fixed parameters")
    p.add_argument("--data")
    p.add_argument("--params", help="parameter directory written by fit")
    p = sub.add_parser("cv", parents=[common], help="hold-out cross-validation")
    p.add_argument("--data")
    p.add_argument("--holdout")
    p.add_argument("--replications")
    p.add_argument("--kernel", action="append", metavar="DIM=PATH", default=[])
    p = sub.add_parser("report", parents=[common], help="quartile summaries of metrics tables")
    p.add_argument("tables", nargs="+", help="metrics CSV files")
    sub.add_parser("experiment", parents=[common],
                   help="run a simulation design end to end and write its metrics")
    return parser


def _extra(args) -> dict:
    extra = {}
    for key in ("data", "init", "params", "holdout", "replications"):
        if getattr(args, key, None) is not None:
            extra[key] = str(getattr(args, key))
    for item in getattr(args, "kernel", []) or []:
        if "=" not in item:
            raise ConfigError(f"--kernel expects DIM=PATH, got {item!r}")
        name, path = item.split("=", 1)
        extra[f"kernel.{name}"] = path
    return extra


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "impute": cmd_impute,
    "cv": cmd_cv,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.extra = _extra(args)
        settings = resolve_settings(args)
        out = Path(settings["out"])
        write_resolved(settings, out)
        if args.command == "report":
            cmd_report(settings, out, args.tables)
        else:
            COMMANDS[args.command](settings, out)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MultiwayError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except ValueError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
