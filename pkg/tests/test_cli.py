import csv
import json

import numpy as np
import pytest

from tica.cli import main, read_manifest
from tica.matrix import read_matrix, write_matrix


def write_config(tmp_path, **cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def small_run(tmp_path):
    cfg = write_config(tmp_path, sim="A", n_train=4, n_test=3, t_train=200, t_test=200, seed=1,
                       sessions=2)
    run = tmp_path / "run"
    assert main(["simulate", "--config", cfg, "--out", str(run)]) == 0
    return cfg, run


def test_simulate_shapes_and_determinism(tmp_path):
    cfg = write_config(tmp_path, sim="A", n_test=2, t_test=200, seed=4)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a)]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(b)]) == 0
    for key in ("s0000_1", "s0001_1"):
        assert read_matrix(a / "cohort" / "test" / f"{key}.bin").shape == (200, 2530)
    assert read_manifest(a)["files"] == read_manifest(b)["files"]


def test_invalid_sim_name(tmp_path, capsys):
    cfg = write_config(tmp_path, sim="Q")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    assert "sim" in capsys.readouterr().err


def test_unknown_field_is_config_error(tmp_path):
    cfg = write_config(tmp_path, sim="A", colour="red")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "r")]) == 2


def test_single_subject_template_is_degenerate(tmp_path):
    cfg = write_config(tmp_path, sim="A", n_train=1, n_test=1, t_train=100, t_test=100)
    run = str(tmp_path / "r")
    assert main(["simulate", "--config", cfg, "--out", run]) == 0
    assert main(["build-template", "--config", cfg, "--out", run]) == 3


def test_full_pipeline(small_run):
    cfg, run = small_run
    assert main(["build-template", "--config", cfg, "--out", str(run)]) == 0
    first = read_manifest(run)["files"]["template/mean.bin"]
    assert main(["build-template", "--config", cfg, "--out", str(run)]) == 0
    assert read_manifest(run)["files"]["template/mean.bin"] == first
    summary = rows(run / "template" / "summary.csv")
    assert len(summary) == 3 and all(float(r["mean_corr"]) > 0.9 for r in summary)
    for method in ("dual_regression", "fast"):
        assert main(["fit", "--config", cfg, "--method", method, "--out", str(run)]) == 0
    assert read_matrix(run / "fits" / "dual_regression" / "s0000_1.bin").shape == (3, 2530)
    timing = rows(run / "fits" / "fast" / "timing.csv")
    assert {"nuisance", "em"} <= {r["stage"] for r in timing}
    assert main(["evaluate", "--config", cfg, "--out", str(run)]) == 0
    summ = rows(run / "reports" / "summary.csv")
    assert {r["method"] for r in summ} == {"dual_regression", "fast"}
    assert all(r["wi2c2"] != "" for r in summ)
    assert len(rows(run / "reports" / "reliability.csv")) == 6


def test_fit_is_idempotent(small_run):
    cfg, run = small_run
    assert main(["build-template", "--config", cfg, "--out", str(run)]) == 0
    assert main(["fit", "--config", cfg, "--method", "fast", "--out", str(run)]) == 0
    before = dict(read_manifest(run)["files"])
    assert main(["fit", "--config", cfg, "--method", "fast", "--out", str(run)]) == 0
    assert read_manifest(run)["files"] == before
    assert not any(k.endswith("timing.csv") for k in before)


def test_exact_space_too_large_refused(small_run, tmp_path):
    _, run = small_run
    cfg = write_config(tmp_path, m=3, q_prime_policy=15, template="true")
    assert main(["fit", "--config", cfg, "--method", "exact", "--out", str(run)]) == 2
    assert not (run / "fits" / "exact").exists()


def test_evaluate_without_fits(small_run):
    cfg, run = small_run
    assert main(["evaluate", "--config", cfg, "--out", str(run)]) == 4


def test_evaluate_refuses_tampered_inputs(small_run):
    cfg, run = small_run
    assert main(["build-template", "--config", cfg, "--out", str(run)]) == 0
    assert main(["fit", "--config", cfg, "--method", "dual_regression", "--out", str(run)]) == 0
    path = run / "fits" / "dual_regression" / "s0001_1.bin"
    m = read_matrix(path)
    write_matrix(m + 1.0, path)
    assert main(["evaluate", "--config", cfg, "--out", str(run)]) == 4


def test_perfect_estimates_and_duplicated_sessions(tmp_path):
    cfg = write_config(tmp_path, sim="A", n_test=3, t_test=50, seed=2, sessions=2)
    run = tmp_path / "run"
    assert main(["simulate", "--config", cfg, "--out", str(run)]) == 0
    out = run / "fits" / "dual_regression"
    out.mkdir(parents=True)
    for i in range(3):
        truth = read_matrix(run / "truth" / "test" / f"s{i:04d}.bin")
        write_matrix(truth, out / f"s{i:04d}_1.bin")
        write_matrix(truth, out / f"s{i:04d}_2.bin")
    from tica.cli import record
    record(run, [out])
    assert main(["evaluate", "--config", cfg, "--out", str(run)]) == 0
    assert all(float(r["corr"]) == pytest.approx(1.0) for r in rows(run / "reports" / "correlations.csv"))
    assert all(float(r["wi2c2"]) == pytest.approx(1.0) for r in rows(run / "reports" / "reliability.csv"))


def test_subspace_method_on_sim_n(tmp_path):
    cfg = write_config(tmp_path, sim="N", n_test=1, t_test=200, seed=3, template="true",
                       q_prime_policy="true", max_iters=5)
    run = str(tmp_path / "run")
    assert main(["simulate", "--config", cfg, "--out", run]) == 0
    assert main(["fit", "--config", cfg, "--method", "subspace", "--out", run]) == 0
    assert main(["evaluate", "--config", cfg, "--out", run]) == 0
    order = rows(tmp_path / "run" / "reports" / "order.csv")
    assert order[0]["q_prime"] == "2" and order[0]["status"] == "correct"
