import json
from pathlib import Path

import numpy as np
import pytest

from dynlat.cli import main


def run(args):
    return main(args)


@pytest.fixture
def sim_dir(tmp_path):
    out = tmp_path / "sim"
    assert run(["simulate", "--scenario", "s2", "--n", "60", "--seed", "7",
                "--out-dir", str(out)]) == 0
    return out


def test_simulate_outputs(sim_dir):
    assert (sim_dir / "data.csv").exists()
    assert (sim_dir / "spec.json").exists()
    truth = json.loads((sim_dir / "true_params.json").read_text())
    assert len(truth) == 24
    assert truth["beta1_C2"] == -1.635


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["simulate", "--n", "25", "--seed", "11",
                    "--out-dir", str(out)]) == 0
    assert (a / "data.csv").read_bytes() == (b / "data.csv").read_bytes()


def test_fit_then_predict_then_gof(sim_dir, tmp_path):
    fitted = tmp_path / "fitted"
    code = run(["fit", str(sim_dir / "data.csv"), str(sim_dir / "spec.json"),
                "--max-iters", "100", "--out-dir", str(fitted)])
    assert code == 0
    report = fitted / "fit_report.csv"
    assert report.exists()
    assert (fitted / "fit_estimates.png").exists()
    meta = json.loads((fitted / "fit_metadata.json").read_text())
    assert meta["converged"] and meta["n_params"] == 24
    assert sum(1 for _ in open(report)) == 25  # header + 24 parameter rows

    preds = tmp_path / "preds"
    assert run(["predict", str(sim_dir / "data.csv"), str(sim_dir / "spec.json"),
                str(report), "--out-dir", str(preds)]) == 0
    assert (preds / "predictions.csv").exists()

    gof = tmp_path / "gof"
    assert run(["gof", str(sim_dir / "data.csv"), str(sim_dir / "spec.json"),
                str(report), "--out-dir", str(gof)]) == 0
    assert (gof / "gof.csv").exists() and (gof / "gof.png").exists()


def test_usage_errors_exit_one(tmp_path):
    assert run(["fit"]) == 1                       # missing positionals
    assert run(["--bogus"]) == 1                   # unknown flag
    assert run(["simulate", "--scenario", "zzz"]) == 1
    missing = tmp_path / "nope.csv"
    spec = tmp_path / "spec.json"
    assert run(["fit", str(missing), str(spec)]) == 1


def test_convert_step_cli(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("-0.2\n")
    assert run(["convert-step", str(a), str(b), "--direction", "fine-to-coarse",
                "--delta-star", "1", "--rho", "2"]) == 0
    assert float(b.read_text().strip()) == pytest.approx(-0.19, abs=1e-12)
    # zero matrix through the continuous limit stays zero
    z = tmp_path / "z.csv"
    zo = tmp_path / "zo.csv"
    z.write_text("0,0\n0,0\n")
    assert run(["convert-step", str(z), str(zo), "--direction",
                "from-continuous", "--delta-star", "1"]) == 0
    out = np.loadtxt(zo, delimiter=",")
    np.testing.assert_allclose(out, np.zeros((2, 2)), atol=1e-15)


def test_convert_step_numerical_failure_exit_two(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("-1.5\n")  # I + A* on the negative real axis
    assert run(["convert-step", str(a), str(b), "--direction", "coarse-to-fine",
                "--delta-star", "1", "--rho", "2"]) == 2


def test_study_coverage_small(tmp_path):
    out = tmp_path / "study"
    assert run(["study", "--study", "coverage", "--replicates", "3",
                "--n", "40", "--seed", "5", "--max-iters", "60",
                "--out-dir", str(out)]) == 0
    table = out / "coverage_study.csv"
    assert table.exists() and (out / "coverage_study.png").exists()
    lines = table.read_text().splitlines()
    assert lines[0].startswith("parameter,true,")
    assert len(lines) == 25


def test_study_deterministic_across_thread_counts(tmp_path):
    outs = []
    for name, threads in (("t1", "1"), ("t4", "4")):
        out = tmp_path / name
        assert run(["study", "--study", "coverage", "--replicates", "2",
                    "--n", "30", "--seed", "5", "--max-iters", "40",
                    "--threads", threads, "--out-dir", str(out)]) == 0
        outs.append((out / "coverage_study.csv").read_bytes())
    assert outs[0] == outs[1]


def test_cv_cli(sim_dir, tmp_path):
    out = tmp_path / "cv"
    assert run(["cv", str(sim_dir / "data.csv"), str(sim_dir / "spec.json"),
                "--k", "3", "--max-iters", "40", "--out-dir", str(out)]) == 0
    assert (out / "cv_predictions.csv").exists()
