"""Simulation designs, cross-validation scoring, parameter files and report summaries.

Everything here is deterministic given a root seed: replication ``r`` draws
from ``SeedSequence(seed, spawn_key=(1, r))`` and design-level truth from
``spawn_key=(0,)``, so results do not depend on how replications are
scheduled across workers.
"""

from __future__ import annotations

import csv
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .avspmm import (AdditiveMean, AvspmmModel, KnownKernel, Unstructured,
                     additive_mean_array, fit_avspmm, kron_mse)
from .exceptions import ConfigError, DataError, NumericalError
from .kernels_io import (Levels, format_float, marker_kernel, read_labeled_matrix,
                         read_level_file, write_labeled_matrix, write_long_table,
                         load_long_table, TableSchema)
from .missing import FitConfig, FitReport, PartialSample, flip_flop_incomplete
from .normal import ArrayNormal, sample

__all__ = [
    "replication_rng",
    "ar1",
    "pearson",
    "quartiles",
    "ModelSpec",
    "fit_model",
    "ExperimentConfig",
    "example1_truth",
    "example1_draw",
    "example1_replication",
    "example4_draws",
    "example4_replication",
    "MarkerDataset",
    "marker_dataset",
    "cv_replication",
    "run_replications",
    "write_params",
    "read_params",
    "write_records",
    "read_records",
    "summarize",
    "write_summary",
    "write_boxplots",
]

METRICS = ("correlation", "trait_mean_correlation", "cov_mse")
DESIGNS = ("example1", "example4", "markers")
NON_GROUP = {"replication", "iterations", "converged", "n_scored", "status"}


def replication_rng(seed: int, *counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(counter)))


def ar1(m: int, rho: float) -> np.ndarray:
    i = np.arange(m)
    return rho ** np.abs(i[:, None] - i[None, :])


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; NaN for fewer than two pairs or a constant side."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2:
        return math.nan
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return math.nan
    return float(np.clip(a @ b / den, -1.0, 1.0))


def quartiles(values) -> tuple:
    """``(min, q1, median, q3, max)`` with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to summarize")
    return tuple(float(q) for q in np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear"))


# ---------------------------------------------------------------- fitting


@dataclass
class ModelSpec:
    """Known kernels by axis, mean structure and starting λ values.

    ``mean`` is ``"saturated"`` (cellwise mean) or a tuple of per-dimension
    inclusion flags for an additive mean.
    """

    kernels: dict = field(default_factory=dict)
    mean: object = "saturated"
    lambdas: dict = field(default_factory=dict)

    def uses_flip_flop(self) -> bool:
        return not self.kernels and self.mean == "saturated"

    def dimension_specs(self, order: int) -> list:
        return [KnownKernel(self.kernels[k], self.lambdas.get(k, 1.0)) if k in self.kernels
                else Unstructured() for k in range(order)]

    def mean_flags(self):
        return None if self.mean == "saturated" else tuple(self.mean)


def fit_model(data: PartialSample, spec: ModelSpec, config: FitConfig | None = None,
              init=None) -> FitReport:
    """Flip-flop for unstructured saturated-mean models, AVSPMM otherwise."""
    if spec.uses_flip_flop():
        return flip_flop_incomplete(data, config, init=init)
    return fit_avspmm(data, spec.dimension_specs(len(data.shape)), config,
                      mean_flags=spec.mean_flags(), init=init)


# ---------------------------------------------------------------- designs


@dataclass
class ExperimentConfig:
    design: str = "example1"
    shape: tuple = (6, 4, 2)
    n: tuple = (20, 50, 100)
    missing: tuple = (0.4, 0.3, 0.2, 0.1)
    replications: int = 30
    seed: int = 0
    p1: tuple = (50, 100, 200)
    markers: int = 500
    lam: float = 0.5
    sigma2: float = 1.0
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ConfigError(f"unknown design {self.design!r}; choose from {', '.join(DESIGNS)}")
        if self.replications < 1:
            raise ConfigError("replications must be at least 1")
        if any(not 0.0 <= p < 1.0 for p in self.missing):
            raise ConfigError("missing probabilities must lie in [0, 1)")
        if any(n < 1 for n in self.n) or any(m < 1 for m in self.shape):
            raise ConfigError("sample sizes and dimensions must be positive")
        if any(p < 2 for p in self.p1) or self.markers < 1:
            raise ConfigError("p1 must be at least 2 and markers at least 1")
        if not self.lam > 0 or not self.sigma2 > 0:
            raise ConfigError("lambda and sigma2 must be positive")


def _truth_rng(cfg: ExperimentConfig) -> np.random.Generator:
    return replication_rng(cfg.seed, 0)


def example1_truth(cfg: ExperimentConfig) -> ArrayNormal:
    """Fixed generating model: AR(1) factors with random correlations and a random mean."""
    rng = _truth_rng(cfg)
    rhos = rng.uniform(0.3, 0.8, size=len(cfg.shape))
    mean = rng.normal(size=cfg.shape)
    return ArrayNormal(mean, tuple(ar1(m, r) for m, r in zip(cfg.shape, rhos)))


def _status(report: FitReport | None) -> str:
    if report is None:
        return "failed"
    return "converged" if report.converged else "max_iterations"


def _fit_and_score(data: PartialSample, complete: np.ndarray, spec: ModelSpec,
                   truth_sigmas, fit_cfg: FitConfig):
    scored = ~data.mask
    t0 = time.perf_counter()
    try:
        report = fit_model(data, spec, fit_cfg)
    except NumericalError:
        report = None
    runtime = time.perf_counter() - t0
    if report is None:
        return dict(correlation=math.nan, cov_mse=math.nan, iterations=0,
                    status="failed"), runtime
    return dict(correlation=pearson(complete[scored], report.imputed[scored]),
                cov_mse=kron_mse(report.model.sigmas, truth_sigmas),
                iterations=report.iterations, status=_status(report)), runtime


def example1_draw(cfg: ExperimentConfig, r: int):
    """Generating model, ``max(N)`` arrays and one deletion uniform per cell.

    The whole grid of a replication shares this draw: the first N arrays
    form the size-N sample and a cell is missing at probability p when its
    uniform falls below p.
    """
    truth = example1_truth(cfg)
    rng = replication_rng(cfg.seed, 1, r)
    X = sample(truth, max(cfg.n), rng)
    return truth, X, rng.random(X.shape)


def example1_replication(cfg: ExperimentConfig, r: int):
    """Fit and score all (N, missing) cells of one replication."""
    truth, X, U = example1_draw(cfg, r)
    records, timings = [], []
    for n in cfg.n:
        for p in cfg.missing:
            mask = U[:n] >= p
            data = PartialSample(np.where(mask, X[:n], np.nan), mask)
            rec, runtime = _fit_and_score(data, X[:n], ModelSpec(), truth.sigmas, cfg.fit)
            key = dict(replication=r, n=n, missing=p)
            records.append({**key, **rec})
            timings.append({**key, "runtime": runtime})
    return records, timings


def _other_factors(cfg: ExperimentConfig, other_shape):
    rng = _truth_rng(cfg)
    rhos = rng.uniform(0.3, 0.8, size=len(other_shape))
    betas = [rng.normal(size=m) for m in other_shape]
    return [ar1(m, rho) for m, rho in zip(other_shape, rhos)], betas


@dataclass
class KernelDraw:
    p1: int
    kernel: np.ndarray
    truth: ArrayNormal
    flags: tuple
    X: np.ndarray
    U: np.ndarray


def example4_draws(cfg: ExperimentConfig, r: int):
    """Yield one :class:`KernelDraw` per p1 for replication ``r``.

    Each p1 gets fresh ±1 markers and a marker kernel; the generating mean is
    additive over the non-kernel dimensions and the kernel dimension has
    factor ``σ²(K + λI)``. N = 1.
    """
    other_shape = tuple(cfg.shape)
    factors, betas = _other_factors(cfg, other_shape)
    rng = replication_rng(cfg.seed, 1, r)
    for p1 in cfg.p1:
        K = marker_kernel(rng.choice([-1.0, 1.0], size=(p1, cfg.markers)))
        shape = (p1,) + other_shape
        flags = (False,) + (True,) * len(other_shape)
        mean = additive_mean_array(AdditiveMean([np.zeros(p1)] + betas, flags), shape)
        sigmas = (cfg.sigma2 * (K + cfg.lam * np.eye(p1)),) + tuple(factors)
        truth = ArrayNormal(mean, sigmas)
        X = sample(truth, 1, rng)
        yield KernelDraw(p1, K, truth, flags, X, rng.random(X.shape))


def example4_replication(cfg: ExperimentConfig, r: int):
    """Fit and score all (p1, missing) cells of one replication."""
    records, timings = [], []
    for d in example4_draws(cfg, r):
        spec = ModelSpec(kernels={0: d.kernel}, mean=d.flags)
        for p in cfg.missing:
            mask = d.U >= p
            data = PartialSample(np.where(mask, d.X, np.nan), mask)
            rec, runtime = _fit_and_score(data, d.X, spec, d.truth.sigmas, cfg.fit)
            key = dict(replication=r, p1=d.p1, missing=p)
            records.append({**key, **rec})
            timings.append({**key, "runtime": runtime})
    return records, timings


@dataclass
class MarkerDataset:
    complete: np.ndarray
    kernel: np.ndarray
    truth: ArrayNormal
    betas: list
    levels: Levels
    lam: float
    sigma2: float


def marker_dataset(cfg: ExperimentConfig) -> MarkerDataset:
    """One synthetic AVSPMM dataset standing in for a field trial with genotyped lines.

    Shape ``p1 x shape`` with the first dimension carrying a marker kernel
    and the last dimension treated as traits with their own means.
    """
    p1 = cfg.p1[0]
    other_shape = tuple(cfg.shape)
    rng = _truth_rng(cfg)
    K = marker_kernel(rng.choice([-1.0, 1.0], size=(p1, cfg.markers)))
    rhos = rng.uniform(0.3, 0.8, size=len(other_shape))
    factors = [ar1(m, rho) for m, rho in zip(other_shape, rhos)]
    shape = (p1,) + other_shape
    flags = (False,) * len(other_shape) + (True,)
    betas = [np.zeros(m) for m in shape]
    betas[-1] = rng.normal(size=shape[-1])
    mean = additive_mean_array(AdditiveMean(betas, flags), shape)
    truth = ArrayNormal(mean, (cfg.sigma2 * (K + cfg.lam * np.eye(p1)),) + tuple(factors))
    X = sample(truth, 1, replication_rng(cfg.seed, 1, 0))[0]
    names = ["line"] + [f"dim{k + 2}" for k in range(len(other_shape) - 1)] + ["trait"]
    labels = [[f"L{i + 1:03d}" for i in range(p1)]]
    labels += [[f"{n[0].upper()}{i + 1}" for i in range(m)] for n, m in zip(names[1:], shape[1:])]
    return MarkerDataset(X, K, truth, betas, Levels(names, labels), cfg.lam, cfg.sigma2)


def cv_replication(data: PartialSample, spec: ModelSpec, holdouts: Sequence[float], seed: int,
                   r: int, fit_cfg: FitConfig, trait_axis: int | None = None,
                   trait_labels: Sequence[str] | None = None):
    """Delete, refit and score one replication for every holdout fraction.

    Cells are deleted when their uniform falls below the holdout fraction,
    whether or not they were observed; only deleted cells that were observed
    beforehand are scored.
    """
    rng = replication_rng(seed, 1, r)
    U = rng.random(data.values.shape)
    records, timings = [], []
    for h in holdouts:
        deleted = U < h
        scored = deleted & data.mask
        mask = data.mask & ~deleted
        reduced = PartialSample(np.where(mask, data.values, np.nan), mask)
        t0 = time.perf_counter()
        try:
            report = fit_model(reduced, spec, fit_cfg)
        except NumericalError:
            report = None
        rec = dict(replication=r, holdout=h, n_scored=int(scored.sum()))
        if report is None:
            rec.update(correlation=math.nan)
        else:
            rec.update(correlation=pearson(data.values[scored], report.imputed[scored]))
        if trait_axis is not None:
            per = []
            for t, lab in enumerate(trait_labels):
                sel = scored & _axis_is(scored.shape, trait_axis + 1, t)
                c = math.nan if report is None else pearson(data.values[sel], report.imputed[sel])
                rec[f"corr_{lab}"] = c
                per.append(c)
            finite = [c for c in per if np.isfinite(c)]
            rec["trait_mean_correlation"] = float(np.mean(finite)) if finite else math.nan
        rec.update(iterations=report.iterations if report else 0, status=_status(report))
        records.append(rec)
        timings.append(dict(replication=r, holdout=h, runtime=time.perf_counter() - t0))
    return records, timings


def _axis_is(shape, axis: int, t: int) -> np.ndarray:
    idx = [np.newaxis] * len(shape)
    idx[axis] = slice(None)
    return (np.arange(shape[axis]) == t)[tuple(idx)]


def run_replications(job: Callable, replications: int, threads: int = 1):
    """Run ``job(r)`` for every replication; results are gathered in replication order."""
    if threads > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(replications)))
    else:
        results = [job(r) for r in range(replications)]
    records = [rec for recs, _ in results for rec in recs]
    timings = [t for _, ts in results for t in ts]
    return records, timings


def design_job(cfg: ExperimentConfig) -> Callable:
    funcs = {"example1": example1_replication, "example4": example4_replication}
    try:
        return partial(funcs[cfg.design], cfg)
    except KeyError:
        raise ConfigError(f"unknown design {cfg.design!r}; choose from {sorted(funcs)}") from None


# ---------------------------------------------------------------- parameter files


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def write_params(out, levels: Levels, report: FitReport | None = None,
                 model: ArrayNormal | None = None, info: dict | None = None) -> None:
    """Write a fitted (or generating) model as labelled CSV files plus ``model.txt``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = model if model is not None else report.model
    info = dict(info or {})
    av = report.extra.get("avspmm") if report is not None else None
    info["kind"] = "avspmm" if av is not None else info.get("kind", "flipflop")
    info["dims"] = ",".join(levels.names)
    bare = Levels(levels.names, levels.labels)
    for k, name in enumerate(levels.names):
        (out / f"levels_{_safe(name)}.txt").write_text("\n".join(levels.labels[k]) + "\n",
                                                      encoding="utf-8")
        write_labeled_matrix(out / f"sigma_{_safe(name)}.csv", model.sigmas[k], levels.labels[k])
    write_long_table(out / "mean.csv", model.mean, bare, with_sample=False)
    if av is not None:
        info["sigma2"] = format_float(av.sigma2)
        for k, spec in enumerate(av.specs):
            if isinstance(spec, KnownKernel):
                info[f"lambda.{levels.names[k]}"] = format_float(spec.lam)
        if isinstance(av.mean, AdditiveMean):
            info["mean"] = "additive"
            info["mean_dims"] = ",".join(n for n, f in zip(levels.names, av.mean.include) if f)
            for k, flag in enumerate(av.mean.include):
                if flag:
                    _write_vector(out / f"beta_{_safe(levels.names[k])}.csv",
                                  av.mean.betas[k], levels.labels[k])
        else:
            info["mean"] = "saturated"
    if report is not None:
        info.update(iterations=report.iterations, converged=str(report.converged).lower(),
                    loglik=format_float(report.loglik_trace[-1]))
        with open(out / "trace.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loglik"])
            for i, ll in enumerate(report.loglik_trace):
                w.writerow([i, format_float(ll)])
    with open(out / "model.txt", "w", encoding="utf-8") as fh:
        for key, value in info.items():
            fh.write(f"{key}={value}\n")


def _write_vector(path, v, labels):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "value"])
        for lab, x in zip(labels, v):
            w.writerow([lab, format_float(x)])


def _read_vector(path, labels):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    got = {r[0]: float(r[1]) for r in rows if r}
    try:
        return np.array([got[lab] for lab in labels])
    except KeyError as err:
        raise DataError(f"level {err.args[0]!r} missing", path=path) from None


def read_key_values(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


@dataclass
class Params:
    model: ArrayNormal
    levels: Levels
    info: dict
    directory: Path

    def avspmm_init(self, spec: ModelSpec) -> AvspmmModel:
        """Rebuild the fitted AVSPMM state for a warm start."""
        names = self.levels.names
        specs = []
        for k, name in enumerate(names):
            if k in spec.kernels:
                lam = float(self.info.get(f"lambda.{name}", spec.lambdas.get(k, 1.0)))
                specs.append(KnownKernel(spec.kernels[k], lam))
            else:
                specs.append(Unstructured(self.model.sigmas[k].copy()))
        if self.info.get("mean") == "additive":
            chosen = set(filter(None, self.info.get("mean_dims", "").split(",")))
            flags = tuple(n in chosen for n in names)
            betas = [_read_vector(self.directory / f"beta_{_safe(n)}.csv", self.levels.labels[k])
                     if flags[k] else np.zeros(len(self.levels.labels[k]))
                     for k, n in enumerate(names)]
            mean = AdditiveMean(betas, flags)
        else:
            mean = self.model.mean.copy()
        sigma2 = float(self.info.get("sigma2", 1.0))
        return AvspmmModel(mean, sigma2, specs)


def read_params(directory) -> Params:
    directory = Path(directory)
    info = read_key_values(directory / "model.txt")
    names = [n for n in info.get("dims", "").split(",") if n]
    if not names:
        raise DataError("model.txt lists no dimensions", path=directory / "model.txt")
    labels = [read_level_file(directory / f"levels_{_safe(n)}.txt") for n in names]
    sigmas = []
    for n, labs in zip(names, labels):
        S, got = read_labeled_matrix(directory / f"sigma_{_safe(n)}.csv")
        if got != labs:
            raise DataError(f"labels of sigma_{n}.csv do not match levels_{n}.txt")
        sigmas.append(S)
    fixed = {n: str(directory / f"levels_{_safe(n)}.txt") for n in names}
    mean_sample, _ = load_long_table(directory / "mean.csv",
                                     TableSchema(dims=names, level_files=fixed))
    if not mean_sample.mask.all():
        raise DataError("mean.csv does not cover every cell", path=directory / "mean.csv")
    model = ArrayNormal(mean_sample.values[0], tuple(sigmas))
    return Params(model, Levels(names, labels), info, directory)


# ---------------------------------------------------------------- metrics tables


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        # shortest text that reads back to the same double
        return "NA" if not np.isfinite(v) else repr(float(v))
    return str(v)


def write_records(path, records: Sequence[dict]) -> None:
    columns = []
    for rec in records:
        columns += [c for c in rec if c not in columns]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rec in records:
            w.writerow([_fmt(rec.get(c, math.nan)) for c in columns])


def read_records(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _to_float(text: str) -> float:
    if text in ("", "NA", "nan"):
        return math.nan
    return float(text)


def _is_metric(col: str) -> bool:
    return col in METRICS or col.startswith("corr_")


def summarize(records: Sequence[dict]) -> list:
    """Quartile rows per design cell and metric, in first-appearance order.

    Design cells are the distinct combinations of every column that is
    neither a metric nor bookkeeping. Non-finite metric values are skipped.
    """
    if not records:
        raise ValueError("no metric records to summarize")
    columns = list(records[0])
    groups = [c for c in columns if c not in NON_GROUP and not _is_metric(c)]
    metrics = [c for c in columns if _is_metric(c)]
    cells: dict = {}
    for rec in records:
        cells.setdefault(tuple(rec[g] for g in groups), []).append(rec)
    rows = []
    for key, recs in cells.items():
        for m in metrics:
            vals = [v for v in (_to_float(r[m]) for r in recs) if np.isfinite(v)]
            row = dict(zip(groups, key))
            row["metric"] = m
            row["count"] = len(vals)
            stats = quartiles(vals) if vals else (math.nan,) * 5
            row.update(zip(("min", "q1", "median", "q3", "max"), stats))
            rows.append(row)
    return rows


def write_summary(path, rows: Sequence[dict]) -> None:
    write_records(path, rows)


def write_boxplots(out, rows: Sequence[dict]) -> list:
    """One static SVG per metric drawn from the summary rows (whiskers at min and max)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "multiway"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    metrics = list(dict.fromkeys(r["metric"] for r in rows))
    for m in metrics:
        sel = [r for r in rows if r["metric"] == m and r["count"]]
        if not sel:
            continue
        groups = [c for c in sel[0] if c not in ("metric", "count", "min", "q1", "median",
                                                  "q3", "max")]
        stats = [dict(label=" ".join(f"{g}={r[g]}" for g in groups), whislo=r["min"],
                      q1=r["q1"], med=r["median"], q3=r["q3"], whishi=r["max"], fliers=[])
                 for r in sel]
        fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(stats)), 4.0))
        ax.bxp(stats, showfliers=False)
        ax.set_ylabel(m)
        ax.tick_params(axis="x", labelrotation=90)
        fig.tight_layout()
        path = out / f"boxplot_{_safe(m)}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
