import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhsub import bernstein as B
from nhsub.config import (EXPERIMENTS, FAMILIES, ConfigError, custom_family_from_csv,
                          parse_config, read_config)

MIN_SIM = "experiment = simulate\nfamily = multistable\n"


def _errors(text):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    return info.value.errors


def test_minimal_simulate_fills_defaults():
    cfg = parse_config(MIN_SIM)
    assert cfg.experiment == "simulate" and cfg.family == "multistable"
    assert cfg["n_paths"] == 1000 and cfg["gamma"] == 1e-6 and cfg["horizon"] == 1.0
    assert cfg.seed == 0 and float(cfg["alpha"](0.3)) == 0.5
    assert cfg.explicit == {"experiment", "family"}


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\n" + MIN_SIM + "seed = 7   # trailing\n")
    assert cfg.seed == 7


def test_alpha_out_of_range_reports_location():
    errs = _errors(MIN_SIM + "alpha = constant 1.2\n")
    assert len(errs) == 1
    assert errs[0].startswith("line 3: alpha:") and "index out of (0,1)" in errs[0]
    assert "t=0" in errs[0]


def test_time_varying_alpha_leaves_range_late():
    errs = _errors(MIN_SIM + "alpha = affine-clamped 0.5 0.3 0.1 1.5\nhorizon = 3\n")
    assert any("index out of (0,1)" in e for e in errs)
    assert parse_config(MIN_SIM + "alpha = affine-clamped 0.5 0.3 0.1 1.5\nhorizon = 1\n")


def test_duplicate_key_names_both_lines():
    errs = _errors(MIN_SIM + "seed = 1\nseed = 2\n")
    assert errs == ["line 4: duplicate key 'seed' (first set on line 3)"]


def test_all_errors_collected():
    errs = _errors("experiment = simulate\nfamily = multistable\nbogus = 1\nn_paths = -3\n"
                   "lambdas = 1 2\ngarbage line\n")
    text = "\n".join(errs)
    assert "unknown key 'bogus'" in text
    assert "not used by experiment 'simulate'" in text
    assert "expected 'key = value'" in text
    assert "n_paths: must be at least 1" in text
    assert len(errs) == 4


def test_unknown_experiment_and_family():
    errs = _errors("experiment = fly\nfamily = weird\n")
    assert any("unknown experiment 'fly'" in e for e in errs)
    assert any("unknown family 'weird'" in e for e in errs)
    assert _errors("family = multistable\n") == ["missing key 'experiment'"]


def test_family_parameter_mismatch():
    errs = _errors("experiment = simulate\nfamily = drift-only\nalpha = 0.5\n")
    assert errs == ["line 3: key 'alpha' is not a parameter of family 'drift-only'"]


def test_bad_values():
    errs = _errors(MIN_SIM + "n_paths = 2.5\ngamma = nan\ncompensate = maybe\n")
    assert len(errs) == 3


def test_cross_checks():
    errs = _errors("experiment = laplace-check\nfamily = multistable\nn_paths = 10\n"
                   "s = 2\nt = 1\n")
    assert any("at least 1000" in e for e in errs) and any("must not exceed t" in e for e in errs)
    errs = _errors("experiment = inverse\nfamily = gamma-like\nalpha = 1\n")
    assert any("needs the multistable family" in e for e in errs)
    errs = _errors("experiment = tempered\nfamily = tempered-stable\n")
    assert errs
    errs = _errors("experiment = simulate\nfamily = tempered-stable\ntheta = constant -1\n")
    assert any(e.startswith("line 3: theta:") for e in errs)


def test_per_experiment_defaults():
    inv = parse_config("experiment = inverse\nfamily = multistable\n")
    assert inv["x_max"] == 6.0 and inv["n_paths"] == 20_000
    res = parse_config("experiment = inverse-residual\nfamily = multistable\n")
    assert (res["n_x"], res["n_t"], res["x_max"]) == (600, 800, 3.0)
    pde = parse_config("experiment = pde\nfamily = multistable\n")
    assert (pde["n_x"], pde["n_t"], pde["x_max"]) == (4096, 20000, 10.0)


def test_xi_vectors():
    cfg = parse_config("experiment = charfun\nfamily = multistable\nxi = 1 0; 0 2\n")
    assert cfg["xi"] == ((1.0, 0.0), (0.0, 2.0))
    assert _errors("experiment = charfun\nfamily = multistable\nxi = 1 0; 2\n")


@pytest.mark.parametrize("exp", EXPERIMENTS)
def test_canonical_round_trip(exp):
    fam = "multistable"
    text = f"experiment = {exp}\nfamily = {fam}\nalpha = sinusoidal 0.6 0.2\n"
    if exp == "inverse-residual" or exp == "inverse":
        text = f"experiment = {exp}\nfamily = {fam}\nalpha = 0.5\n"
    cfg = parse_config(text)
    again = parse_config(f"experiment = {exp}\nfamily = {fam}\n" + "\n".join(cfg.canonical()))
    assert again.canonical() == cfg.canonical()


@settings(max_examples=25)
@given(seed=st.integers(0, 2 ** 40), n=st.integers(1, 10 ** 6))
def test_numeric_keys_round_trip(seed, n):
    cfg = parse_config(MIN_SIM + f"seed = {seed}\nn_paths = {n}\n")
    assert cfg.seed == seed and cfg["n_paths"] == n


def test_with_overrides_ignores_none():
    cfg = parse_config(MIN_SIM + "seed = 3\n")
    assert cfg.with_overrides(seed=None).seed == 3
    assert cfg.with_overrides(seed=9).seed == 9


def test_families_table():
    assert set(FAMILIES) == {"multistable", "gamma-like", "tempered-stable", "drift-only",
                             "custom"}
    for name in ("multistable", "gamma-like", "drift-only"):
        key = FAMILIES[name][0][0]
        cfg = parse_config(f"experiment = simulate\nfamily = {name}\n{key} = 0.5\n")
        assert cfg.build_family().name == name


# --- custom tables --------------------------------------------------------


def _write_table(path, fn, s_vals, t_vals):
    lines = ["# density table", "s,t,nu"]
    for s in s_vals:
        for t in t_vals:
            lines.append(f"{float(s)!r},{float(t)!r},{float(fn(s, t))!r}")
    path.write_text("\n".join(lines) + "\n")


def test_custom_table_family(tmp_path):
    s_vals = np.linspace(0.1, 5.0, 50)
    _write_table(tmp_path / "nu.csv", lambda s, t: (1 + t) * np.exp(-s), s_vals, [0.0, 1.0, 2.0])
    cfg = read_config_text(tmp_path, "experiment = simulate\nfamily = custom\n"
                           "custom_table = nu.csv\n")
    fam = cfg.build_family()
    assert float(fam.drift_rate(0.5)) == 0.0
    assert float(fam.jump_density(1.0, 0.5)) == pytest.approx(1.5 * np.exp(-1.0), rel=1e-3)
    assert float(fam.jump_density(6.0, 0.5)) == 0.0        # outside the s range
    assert float(fam.jump_density(1.0, 9.0)) == pytest.approx(3 * np.exp(-1.0), rel=1e-3)
    assert fam.small_mean(0.05, 0.0) == 0.0
    assert float(fam.tail(0.1, 1.0)) == pytest.approx(2 * (np.exp(-0.1) - np.exp(-5.0)),
                                                      rel=1e-3)


def read_config_text(tmp_path, text):
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    return read_config(p)


def test_custom_table_validation(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="header"):
        custom_family_from_csv(tmp_path / "bad.csv")
    (tmp_path / "gap.csv").write_text("s,t,nu\n1,0,1\n2,0,1\n1,1,1\n")
    with pytest.raises(ValueError, match="full"):
        custom_family_from_csv(tmp_path / "gap.csv")
    (tmp_path / "neg.csv").write_text("s,t,nu\n1,0,1\n2,0,-1\n1,1,1\n2,1,1\n")
    with pytest.raises(ValueError, match="negative"):
        custom_family_from_csv(tmp_path / "neg.csv")
    errs = _errors("experiment = simulate\nfamily = custom\n")
    assert "family 'custom' needs key 'custom_table'" in errs


def test_custom_drift_defaults_to_zero():
    cfg = parse_config("experiment = simulate\nfamily = custom\ncustom_table = x.csv\n")
    assert float(cfg["drift"](1.0)) == 0.0
    assert isinstance(cfg["drift"], B.TimeVaryingIndex)
