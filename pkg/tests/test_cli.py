import csv
import math
import time

import numpy as np
import pytest

from multiway import harness as hz
from multiway.cli import main
from multiway.kernels_io import Levels, load_long_table, marker_kernel, write_labeled_matrix
from multiway.normal import ArrayNormal

SMALL = ["--set", "shape=3,2", "--set", "n=10", "--set", "missing=0.3", "--set", "replications=2"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def simulate(tmp_path, *extra, name="sim"):
    out = tmp_path / name
    assert main(["simulate", "--seed", "3", "--out", str(out), *SMALL, *extra]) == 0
    return out


# ------------------------------------------------------------ exit codes


def test_exit_codes(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert main(["simulate", "--out", str(tmp_path), "--set", "missing=1.5"]) == 2
    assert main(["fit", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,value\nx,1\nx,2\n")
    assert main(["fit", "--out", str(tmp_path), "--data", str(bad)]) == 3
    assert "line 3" in capsys.readouterr().err
    assert main(["fit", "--out", str(tmp_path), "--data", str(tmp_path / "none.csv")]) == 5
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", "--out", str(blocker / "x"), *SMALL]) == 5
    with pytest.raises(SystemExit) as err:
        main(["nonsense"])
    assert err.value.code == 2


def test_numerical_failure_exit_code(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("r,c,value\na,x,1\nb,x,2\na,y,3\nb,y,4\n")
    args = ["fit", "--out", str(tmp_path / "o"), "--data", str(data), "--set", "mean=saturated"]
    assert main(args) == 4


# ------------------------------------------------------------ simulate


def test_simulate_zero_missing_is_fully_observed(tmp_path):
    out = simulate(tmp_path, "--set", "missing=0")
    data, _ = load_long_table(out / "rep_001" / "data_missing_0.csv")
    assert data.mask.all()
    assert (out / "config.txt").read_text().count("seed=3") == 1


def test_simulate_binomial_observed_fraction(tmp_path):
    out = tmp_path / "b"
    assert main(["simulate", "--seed", "1", "--out", str(out), "--set", "n=20",
                 "--set", "missing=0.4", "--set", "replications=1"]) == 0
    data, _ = load_long_table(out / "rep_001" / "data_missing_0.4.csv")
    n = data.mask.size
    assert n == 20 * 48
    sd = math.sqrt(n * 0.4 * 0.6)
    assert abs(data.mask.sum() - 0.6 * n) <= 3 * sd


def test_simulate_is_byte_identical(tmp_path):
    a = simulate(tmp_path, name="a")
    b = simulate(tmp_path, name="b")
    # config.txt records the output directory itself
    files = sorted(p.relative_to(a) for p in a.rglob("*")
                   if p.is_file() and p.name != "config.txt")
    assert len(files) > 5
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_simulate_example4_writes_kernels(tmp_path):
    out = tmp_path / "e4"
    assert main(["simulate", "--out", str(out), "--set", "design=example4", "--set", "p1=8",
                 "--set", "replications=1", "--set", "missing=0.2", "--set", "markers=20"]) == 0
    sub = out / "rep_001" / "p1_8"
    assert (sub / "kernel.csv").exists() and (sub / "data_missing_0.2.csv").exists()
    assert hz.read_params(sub / "truth").info["kind"] == "truth"


# ------------------------------------------------------------ fit and impute


@pytest.fixture
def example1_data(tmp_path):
    out = tmp_path / "e1"
    assert main(["simulate", "--seed", "11", "--out", str(out), "--set", "n=20",
                 "--set", "missing=0.2", "--set", "replications=1"]) == 0
    return out / "rep_001" / "data_missing_0.2.csv"


def test_fit_runtime_trace_and_warm_start(tmp_path, example1_data):
    fit_dir = tmp_path / "fit"
    t0 = time.perf_counter()
    assert main(["fit", "--out", str(fit_dir), "--data", str(example1_data)]) == 0
    assert time.perf_counter() - t0 < 60
    trace = np.array([float(r[1]) for r in read_csv(fit_dir / "trace.csv")[1:]])
    assert np.all(np.diff(trace) >= -1e-8 * np.abs(trace[:-1]))
    info = hz.read_key_values(fit_dir / "model.txt")
    assert info["kind"] == "flipflop" and info["converged"] == "true"

    warm = tmp_path / "warm"
    assert main(["fit", "--out", str(warm), "--data", str(example1_data),
                 "--init", str(fit_dir)]) == 0
    assert int(hz.read_key_values(warm / "model.txt")["iterations"]) <= 2

    imp = tmp_path / "imp"
    assert main(["impute", "--out", str(imp), "--data", str(example1_data),
                 "--params", str(fit_dir)]) == 0
    assert (imp / "imputed.csv").read_bytes() == (fit_dir / "imputed.csv").read_bytes()


def test_impute_cell_set_is_mask_complement(tmp_path, example1_data):
    fit_dir = tmp_path / "fit"
    assert main(["fit", "--out", str(fit_dir), "--data", str(example1_data)]) == 0
    data, _ = load_long_table(example1_data)
    rows = read_csv(fit_dir / "imputed.csv")
    assert rows[0] == ["sample", "d1", "d2", "d3", "value"]
    got = {tuple(r[:4]) for r in rows[1:]}
    want = set()
    for idx in zip(*np.nonzero(~data.mask)):
        want.add(tuple(str(i + 1) for i in idx))
    assert got == want
    assert all(r[4] != "NA" for r in rows[1:])


def test_impute_no_missing_is_empty(tmp_path):
    model = ArrayNormal(np.zeros((2, 1)), (np.eye(2), np.eye(1)))
    levels = Levels(["a", "b"], [["p", "q"], ["x"]])
    hz.write_params(tmp_path / "params", levels, model=model)
    data = tmp_path / "d.csv"
    data.write_text("a,b,value\np,x,1\nq,x,2\n")
    assert main(["impute", "--out", str(tmp_path / "o"), "--data", str(data),
                 "--params", str(tmp_path / "params")]) == 0
    assert (tmp_path / "o" / "imputed.csv").read_text() == "a,b,value\n"


def test_impute_bivariate_oracle(tmp_path):
    rho, x1 = -0.35, 2.25
    model = ArrayNormal(np.array([[0.5], [1.0]]), (np.array([[2.0, rho], [rho, 1.0]]), np.eye(1)))
    levels = Levels(["a", "b"], [["p", "q"], ["x"]])
    hz.write_params(tmp_path / "params", levels, model=model)
    data = tmp_path / "d.csv"
    data.write_text(f"a,b,value\np,x,{x1}\nq,x,NA\n")
    assert main(["impute", "--out", str(tmp_path / "o"), "--data", str(data),
                 "--params", str(tmp_path / "params")]) == 0
    rows = read_csv(tmp_path / "o" / "imputed.csv")
    assert rows[1][:2] == ["q", "x"]
    assert float(rows[1][2]) == pytest.approx(1.0 + rho / 2.0 * (x1 - 0.5), rel=1e-14)


def test_fit_with_kernel_predicts_new_levels(tmp_path):
    rng = np.random.default_rng(4)
    labels = [f"E{i:02d}" for i in range(40)]
    K = marker_kernel(rng.choice([-1.0, 1.0], size=(40, 15)))
    write_labeled_matrix(tmp_path / "k.csv", K, labels)
    L = np.linalg.cholesky(K + np.eye(40))
    Y = L @ rng.normal(size=(40, 2)) + np.array([3.0, -1.0])
    lines = ["entity,trait,value"]
    for i, lab in enumerate(labels[:36]):
        for t in range(2):
            lines.append(f"{lab},t{t + 1},{float(Y[i, t])!r}")
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    args = ["--data", str(tmp_path / "d.csv"), "--kernel", f"entity={tmp_path / 'k.csv'}"]
    out = tmp_path / "fit"
    assert main(["fit", "--out", str(out), *args]) == 0
    info = hz.read_key_values(out / "model.txt")
    assert info["kind"] == "avspmm" and info["mean_dims"] == "trait"
    assert info["converged"] == "true"
    rows = read_csv(out / "imputed.csv")
    assert {r[0] for r in rows[1:]} == set(labels[36:])
    warm = tmp_path / "warm"
    assert main(["fit", "--out", str(warm), *args, "--init", str(out)]) == 0
    assert int(hz.read_key_values(warm / "model.txt")["iterations"]) <= 2


# ------------------------------------------------------------ cv, experiment, report


def test_cv_rejects_zero_holdout(tmp_path, example1_data):
    assert main(["cv", "--out", str(tmp_path), "--data", str(example1_data),
                 "--holdout", "0"]) == 2


def test_cv_is_deterministic(tmp_path, example1_data):
    args = ["--data", str(example1_data), "--holdout", "0.2", "--replications", "2",
            "--seed", "5", "--set", "traits=d3"]
    assert main(["cv", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["cv", "--out", str(tmp_path / "b"), *args]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    header = read_csv(tmp_path / "a" / "metrics.csv")[0]
    assert {"corr_1", "corr_2", "trait_mean_correlation"} <= set(header)


def test_experiment_threads_and_report(tmp_path):
    one, two = tmp_path / "one", tmp_path / "two"
    assert main(["experiment", "--out", str(one), "--seed", "2", *SMALL]) == 0
    assert main(["experiment", "--out", str(two), "--seed", "2", "--threads", "2", *SMALL]) == 0
    assert (one / "metrics.csv").read_bytes() == (two / "metrics.csv").read_bytes()
    rows = read_csv(one / "metrics.csv")
    assert rows[0] == ["replication", "n", "missing", "correlation", "cov_mse", "iterations",
                       "status"]
    assert len(rows) == 3

    rep = tmp_path / "rep"
    assert main(["report", "--out", str(rep), "--format", "svg", str(one / "metrics.csv")]) == 0
    summary = read_csv(rep / "summary.csv")
    assert summary[0] == ["n", "missing", "metric", "count", "min", "q1", "median", "q3", "max"]
    assert (rep / "boxplot_correlation.svg").exists()
