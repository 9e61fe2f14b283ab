import csv
import hashlib
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import stats

from nhsub.cli import main
from nhsub.config import parse_config
from nhsub.experiments import EXIT_CONFIG, EXIT_FAIL, EXIT_NUMERIC, EXIT_PASS, run


def _write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _summary(d):
    out = {}
    for line in open(os.path.join(d, "summary.txt")):
        k, v = line.rstrip("\n").split("=", 1)
        out[k] = v
    return out


def _results(d, name="results.csv"):
    with open(os.path.join(d, name)) as fh:
        lines = fh.read().splitlines()
    assert lines[0] == "# nhsub v1"
    body = [ln for ln in lines if not ln.startswith("#")]
    return list(csv.DictReader(body))


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _quiet(msg):
    pass


# --- exit codes and layout ------------------------------------------------


def test_laplace_drift_only_passes(tmp_path):
    cfg = parse_config("experiment = laplace-check\nfamily = drift-only\ndrift = constant 2\n"
                       "n_paths = 1000\n")
    code, d = run(cfg, outdir=str(tmp_path), log=_quiet)
    assert code == EXIT_PASS and d == str(tmp_path / "laplace-check-0")
    s = _summary(d)
    assert s["status"] == "pass" and s["exit_code"] == "0"
    rows = _results(d)
    assert [float(r["lambda"]) for r in rows] == [0.5, 1.0, 2.0, 4.0]
    assert all(float(r["se"]) == 0.0 for r in rows)


def test_summary_reproducible_from_results(tmp_path):
    cfg = parse_config("experiment = laplace-check\nfamily = gamma-like\nalpha = 2\n"
                       "n_paths = 2000\ngamma = 1e-3\ncompensate = true\n")
    code, d = run(cfg, outdir=str(tmp_path), log=_quiet)
    s = _summary(d)
    for r in _results(d):
        z = abs(float(r["estimate"]) - float(r["target_truncated"])) / float(r["se"])
        assert float(s[f"check.z_lam{float(r['lambda']):g}.value"]) == pytest.approx(z, rel=1e-12)
    assert code == (EXIT_PASS if s["status"] == "pass" else EXIT_FAIL)


def test_failing_check_exit_one(tmp_path):
    cfg = parse_config("experiment = laplace-check\nfamily = gamma-like\nalpha = 2\n"
                       "n_paths = 1000\ngamma = 0.5\ntol_sigma = 1e-9\n")
    code, d = run(cfg, outdir=str(tmp_path), log=_quiet)
    assert code == EXIT_FAIL
    assert _summary(d)["status"] == "fail"


def test_numeric_failure_leaves_no_artifacts(tmp_path):
    cfg = parse_config("experiment = pde\nfamily = multistable\nalpha = 0.5\nx_max = 1\n"
                       "n_x = 128\nn_t = 2000\nmax_outflow = 0.001\n")
    msgs = []
    code, d = run(cfg, outdir=str(tmp_path), log=msgs.append)
    assert code == EXIT_NUMERIC and d is None
    assert os.listdir(tmp_path) == []
    assert "nhsub.fracpde" in msgs[0] and "escaped mass" in msgs[0]


def test_bad_custom_table_is_config_error(tmp_path):
    path = _write(tmp_path, "experiment = simulate\nfamily = custom\ncustom_table = nope.csv\n")
    assert main(["run", path, "--outdir", str(tmp_path / "out")]) == EXIT_CONFIG
    assert os.listdir(tmp_path / "out") == []


def test_seed_override_sets_directory(tmp_path):
    path = _write(tmp_path, "experiment = simulate\nfamily = gamma-like\nalpha = 1\n"
                  "n_paths = 20\nseed = 5\n")
    assert main(["run", path, "--outdir", str(tmp_path), "--seed", "9"]) == EXIT_PASS
    assert (tmp_path / "simulate-9" / "results.csv").exists()
    assert not (tmp_path / "simulate-5").exists()


def test_simulate_deterministic_across_runs_and_threads(tmp_path, monkeypatch):
    path = _write(tmp_path, "experiment = simulate\nfamily = multistable\n"
                  "alpha = sinusoidal 0.6 0.2\nn_paths = 300\nseed = 42\ngamma = 1e-4\n")
    assert main(["run", path, "--outdir", str(tmp_path / "a"), "--threads", "1"]) == 0
    monkeypatch.setenv("NHSUB_THREADS", "3")
    assert main(["run", path, "--outdir", str(tmp_path / "b")]) == 0
    for name in ("results.csv", "summary.txt", "path-0.csv"):
        assert _sha(tmp_path / "a" / "simulate-42" / name) == \
            _sha(tmp_path / "b" / "simulate-42" / name)
    rows = _results(tmp_path / "a" / "simulate-42")
    assert len(rows) == 300 * 11


def test_rerun_replaces_previous_output(tmp_path):
    path = _write(tmp_path, "experiment = simulate\nfamily = drift-only\nn_paths = 5\n")
    assert main(["run", path, "--outdir", str(tmp_path)]) == 0
    (tmp_path / "simulate-0" / "stale.txt").write_text("x")
    assert main(["run", path, "--outdir", str(tmp_path)]) == 0
    assert sorted(os.listdir(tmp_path / "simulate-0")) == ["path-0.csv", "results.csv",
                                                           "summary.txt"]


# --- CLI surface ----------------------------------------------------------


def test_list_families(capsys):
    assert main(["list-families"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [ln.split(":")[0] for ln in out] == ["multistable", "gamma-like", "tempered-stable",
                                                 "drift-only", "custom"]


def test_validate_ok_and_errors(tmp_path, capsys):
    good = _write(tmp_path, "experiment = simulate\nfamily = multistable\n", "good.cfg")
    assert main(["validate", good]) == 0
    out = capsys.readouterr().out
    assert "simulate (multistable): valid" in out and "n_paths = 1000" in out
    bad = _write(tmp_path, "experiment = simulate\nfamily = multistable\nalpha = constant 1.2\n"
                 "seed = 1\nseed = 2\n", "bad.cfg")
    assert main(["validate", bad]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "index out of (0,1)" in err and "duplicate key 'seed'" in err


def test_usage_errors_exit_two(tmp_path, monkeypatch):
    assert main([]) == EXIT_CONFIG
    assert main(["run"]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    path = _write(tmp_path, "experiment = simulate\nfamily = drift-only\n")
    assert main(["run", path, "--threads", "0"]) == EXIT_CONFIG
    assert main(["run", path, "--seed", "-1"]) == EXIT_CONFIG
    monkeypatch.setenv("NHSUB_THREADS", "many")
    with pytest.raises(SystemExit):
        main(["run", path, "--outdir", str(tmp_path)])


def test_console_script_runs(tmp_path):
    path = _write(tmp_path, "experiment = laplace-check\nfamily = drift-only\nn_paths = 1000\n")
    proc = subprocess.run([sys.executable, "-m", "nhsub.cli", "run", path, "--outdir",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip() == str(tmp_path / "laplace-check-0")
    assert "PASS" in proc.stderr


# --- each experiment end to end (small settings) --------------------------

SMALL = {
    "pde": "alpha = 0.5\nn_x = 512\nn_t = 2500\ntol_rel = 0.5\nrefine = true\n",
    "inverse": "alpha = 0.5\nn_paths = 10000\nn_x = 300\nn_s = 400\ntol_ks = 0.03\n"
               "tol_rel = 0.05\n",
    "inverse-residual": "alpha = 0.5\n",
    "propagator": "alpha = sinusoidal 0.6 0.2\nnodes = 8\n",
    "msd": "alpha = 0.5\nn_paths = 20000\ngamma = 1e-3\nt_values = 1\nt_probe_max = 64\n",
    "charfun": "alpha = sinusoidal 0.6 0.2\ngamma = 1e-4\ncompensate = true\nxi = 1; 2\n",
    "localize": "alpha = sinusoidal 0.6 0.2\nn_paths = 5000\ntol_ks = 0.05\n",
}


@pytest.mark.parametrize("exp", sorted(SMALL))
def test_experiment_end_to_end(exp, tmp_path):
    cfg = parse_config(f"experiment = {exp}\nfamily = multistable\n" + SMALL[exp])
    code, d = run(cfg, outdir=str(tmp_path), log=_quiet)
    s = _summary(d)
    assert code == EXIT_PASS, s
    rows = _results(d)
    assert rows
    if exp == "pde":
        err = max(float(r["rel_error"]) for r in rows if r["in_range"] == "true")
        assert float(s["check.linf_rel_error.value"]) == pytest.approx(err, rel=1e-12)
        assert "check.refinement_factor.value" in s
        assert (tmp_path / "pde-0" / "field.bin").exists()
    if exp == "inverse-residual":
        res = max(abs(float(r["residual"])) for r in rows)
        assert float(s["check.residual_within_scale.value"]) == pytest.approx(res, rel=1e-12)
        assert s["check.b_term_zero.pass"] == "true"
    if exp == "localize":
        a = [float(r["rescaled_increment"]) for r in rows]
        b = [float(r["stable_draw"]) for r in rows]
        ks = stats.ks_2samp(a, b).statistic
        assert float(s["check.ks_two_sample.value"]) == pytest.approx(ks, rel=1e-12)
    if exp == "msd":
        assert rows[0]["target"] == "divergent"
        assert s["info.regime"] == "infinite"
        assert _results(d, "regime.csv")
    if exp == "propagator":
        assert (tmp_path / "propagator-0" / "eigenpairs.csv").exists()
        assert len(_results(d, "exponents.csv")) == 8
    if exp == "charfun":
        assert set(rows[0]) == {"xi", "re", "im", "target_re", "se", "se_im", "target_exact"}
