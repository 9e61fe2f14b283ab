"""Flat ``key = value`` experiment configs.

Lines are ``key = value``; ``#`` starts a comment.  Time-varying parameters
are written ``<kind> p1 p2 ...`` (kinds as in :class:`TimeVaryingIndex`) or
as a bare number for a constant.  All problems are collected and reported
together.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from . import bernstein as B

__all__ = [
    "ConfigError",
    "EXPERIMENTS",
    "ExperimentConfig",
    "FAMILIES",
    "build_family",
    "custom_family_from_csv",
    "parse_config",
    "read_config",
]

EXPERIMENTS = ("simulate", "laplace-check", "pde", "inverse", "inverse-residual",
               "propagator", "msd", "charfun", "localize")

# family name -> (parameter keys, description)
FAMILIES = {
    "multistable": (("alpha",), "f = lam^alpha(t), alpha in (0,1)"),
    "gamma-like": (("alpha",), "f = log(1 + lam/alpha(t)), alpha > 0"),
    "tempered-stable": (("alpha", "theta"),
                        "f = (lam + theta(t))^alpha(t) - theta(t)^alpha(t), alpha in (0,1), theta >= 0"),
    "drift-only": (("drift",), "f = lam b'(t), b' >= 0"),
    "custom": (("custom_table", "drift"),
               "tabulated nu(s, t) from a CSV with columns s,t,nu (bilinear), plus drift"),
}


class ConfigError(ValueError):
    """All problems found in one config, one per entry of ``errors``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


# ---------------------------------------------------------------------------
# value parsers
# ---------------------------------------------------------------------------


def _int(text):
    v = float(text)
    if not v.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _float(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {text!r}")
    return v


def _floats(text):
    vals = [_float(t) for t in text.replace(",", " ").split()]
    if not vals:
        raise ValueError("expected at least one number")
    return tuple(vals)


def _vectors(text):
    rows = [_floats(chunk) for chunk in text.split(";") if chunk.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("expected ';'-separated vectors of equal length")
    return tuple(rows)


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _str(text):
    return text.strip()


def _index(text):
    parts = text.split()
    if len(parts) == 1:
        return B.TimeVaryingIndex.constant(_float(parts[0]))
    return B.TimeVaryingIndex(parts[0], tuple(_float(p) for p in parts[1:]))


def _optional_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else _int(text)


# key -> (parser, default, check) ; check returns an error string or None
def _pos(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be nonnegative"


def _atleast(n):
    return lambda v: None if v >= n else f"must be at least {n}"


def _all_pos(v):
    return None if all(x > 0 for x in v) else "entries must be positive"


def _all_nonneg(v):
    return None if all(x >= 0 for x in v) else "entries must be nonnegative"


_KEYS = {
    "experiment": (_str, None, None),
    "family": (_str, None, None),
    "alpha": (_index, "constant 0.5", None),
    "theta": (_index, "constant 1", None),
    "drift": (_index, "constant 1", None),
    "custom_table": (_str, None, None),
    "seed": (_int, "0", _nonneg),
    "outdir": (_str, "out", None),
    "threads": (_optional_int, "auto", lambda v: None if v is None or v >= 1 else "must be >= 1"),
    "horizon": (_float, "1", _pos),
    "n_eval": (_int, "11", _atleast(2)),
    "gamma": (_float, "1e-6", _pos),
    "gamma0": (_float, "1e-4", _pos),
    "n_paths": (_int, "100000", _atleast(1)),
    "compensate": (_bool, "false", None),
    "lambdas": (_floats, "0.5 1 2 4", _all_nonneg),
    "s": (_float, "0", _nonneg),
    "t": (_float, "1", _pos),
    "r": (_float, "0", _nonneg),
    "tol_sigma": (_float, "3", _pos),
    "x_max": (_float, "10", _pos),
    "n_x": (_int, "4096", _atleast(8)),
    "n_t": (_int, "20000", _atleast(8)),
    "n_s": (_int, "1000", _atleast(8)),
    "t_max": (_float, "2", _pos),
    "t_start": (_float, "0.05", _pos),
    "max_outflow": (_float, "0.25", _pos),
    "x_lo": (_float, "0.05", _pos),
    "tol_rel": (_float, "0.02", _pos),
    "tol_ks": (_float, "0.02", _pos),
    "refine": (_bool, "false", None),
    "min_refine_factor": (_float, "1.5", _pos),
    "x_probe": (_float, "1", _pos),
    "probes": (_floats, "0.5 1 1.5", _all_pos),
    "tol_b": (_float, "1e-12", _pos),
    "nodes": (_int, "16", _atleast(1)),
    "length": (_float, repr(math.pi), _pos),
    "operator_file": (_str, None, None),
    "tol": (_float, "1e-10", _pos),
    "gen_tol": (_float, "1e-8", _pos),
    "tol_law": (_float, "1e-8", _pos),
    "tol_gen": (_float, "1e-6", _pos),
    "tol_contract": (_float, "1e-10", _pos),
    "h": (_float, "0.02", _pos),
    "ratio_lo": (_float, "3.5", _pos),
    "ratio_hi": (_float, "4.5", _pos),
    "t_values": (_floats, "1 3", _all_pos),
    "dims": (_int, "1", _atleast(1)),
    "tail_lo": (_float, "0.4", _pos),
    "tail_hi": (_float, "0.6", _pos),
    "t_probe_max": (_float, "1024", _pos),
    "xi": (_vectors, "0.5; 1; 2", None),
    "t0": (_float, "1", _nonneg),
    "T": (_float, "1", _pos),
}

_COMMON = ("experiment", "family", "alpha", "theta", "drift", "custom_table", "seed", "outdir",
           "threads")

# experiment -> (keys, per-experiment default overrides)
_EXPERIMENT_KEYS = {
    "simulate": (("horizon", "n_eval", "gamma", "n_paths", "compensate"),
                 {"n_paths": "1000"}),
    "laplace-check": (("lambdas", "s", "t", "gamma", "n_paths", "compensate", "tol_sigma"), {}),
    "pde": (("x_max", "n_x", "n_t", "t", "t_start", "max_outflow", "x_lo", "tol_rel", "tol_ks",
             "n_paths", "gamma", "refine", "min_refine_factor"), {}),
    "inverse": (("t", "x_max", "n_x", "n_s", "t_start", "max_outflow", "n_paths", "gamma",
                 "tol_ks", "x_probe", "tol_rel"),
                {"x_max": "6", "n_x": "600", "n_paths": "20000", "gamma": "1e-5",
                 "max_outflow": "1", "tol_rel": "0.01"}),
    "inverse-residual": (("t_max", "x_max", "n_x", "n_t", "t_start", "max_outflow", "probes",
                          "tol_b"),
                         {"x_max": "3", "n_x": "600", "n_t": "800", "max_outflow": "1"}),
    "propagator": (("nodes", "length", "operator_file", "r", "s", "t", "tol", "gen_tol",
                    "tol_law", "tol_gen", "tol_contract", "h", "ratio_lo", "ratio_hi"),
                   {"s": "0.3"}),
    "msd": (("t_values", "dims", "gamma", "n_paths", "tol_sigma", "tail_lo", "tail_hi",
             "t_probe_max"), {}),
    "charfun": (("xi", "s", "t", "gamma", "n_paths", "compensate", "tol_sigma"),
                {"n_paths": "10000"}),
    "localize": (("t0", "r", "T", "n_paths", "gamma0", "tol_ks"), {"r": "1e-3"}),
}


# ---------------------------------------------------------------------------
# config object
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    family: str
    values: dict
    explicit: frozenset = field(default_factory=frozenset)
    base_dir: str = "."

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self):
        return self.values["seed"]

    def with_overrides(self, **kw):
        vals = dict(self.values)
        for k, v in kw.items():
            if v is not None:
                vals[k] = v
        return replace(self, values=vals)

    def canonical(self):
        """Sorted ``key = value`` lines (defaults included), without outdir/threads."""
        out = []
        for k in sorted(self.values):
            if k in ("outdir", "threads"):
                continue
            v = self.values[k]
            if isinstance(v, B.TimeVaryingIndex):
                v = v.describe()
            elif isinstance(v, tuple):
                v = "; ".join(" ".join(repr(x) for x in r) for r in v) if v and isinstance(
                    v[0], tuple) else " ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{k} = {v}")
        return out

    def build_family(self):
        return build_family(self.family, self.values, self.base_dir)


def _required_horizon(exp, v):
    """Largest time the experiment evaluates the family at."""
    if exp == "simulate":
        return v["horizon"]
    if exp in ("laplace-check", "charfun", "pde", "propagator"):
        return v["t"]
    if exp == "inverse":
        return v["x_max"]
    if exp == "inverse-residual":
        return v["x_max"]
    if exp == "msd":
        return max(v["t_values"])
    if exp == "localize":
        return v["t0"] + v["r"] * v["T"]
    return 1.0


def parse_config(text, base_dir="."):
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    errors = []
    raw, where = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"line {lineno}: expected 'key = value'")
            continue
        key, val = (s.strip() for s in body.split("=", 1))
        if key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r} (first set on line {where[key]})")
            continue
        raw[key] = val
        where[key] = lineno

    exp = raw.get("experiment")
    if exp is None:
        errors.append("missing key 'experiment'")
    elif exp not in EXPERIMENTS:
        errors.append(f"line {where['experiment']}: unknown experiment {exp!r} "
                      f"(choose from {', '.join(EXPERIMENTS)})")
        exp = None
    fam = raw.get("family")
    if fam is None:
        errors.append("missing key 'family'")
    elif fam not in FAMILIES:
        errors.append(f"line {where['family']}: unknown family {fam!r} "
                      f"(choose from {', '.join(FAMILIES)})")
        fam = None

    allowed = set(_COMMON)
    overrides = {}
    if exp is not None:
        keys, overrides = _EXPERIMENT_KEYS[exp]
        allowed |= set(keys)
    for key in raw:
        if key not in _KEYS:
            errors.append(f"line {where[key]}: unknown key {key!r}")
        elif exp is not None and key not in allowed:
            errors.append(f"line {where[key]}: key {key!r} is not used by experiment {exp!r}")
        elif fam is not None and key in ("alpha", "theta", "drift", "custom_table") \
                and key not in FAMILIES[fam][0]:
            errors.append(f"line {where[key]}: key {key!r} is not a parameter of family {fam!r}")

    values = {}
    wanted = allowed if exp is not None else set(raw) & set(_KEYS)
    for key in sorted(wanted):
        parser, default, check = _KEYS[key]
        if key in ("experiment", "family"):
            continue
        if key in ("alpha", "theta", "drift", "custom_table") and (
                fam is None or key not in FAMILIES[fam][0]):
            continue
        if key == "drift" and fam == "custom":
            default = "constant 0"
        text_val = raw.get(key, overrides.get(key, default))
        if text_val is None:
            if key == "custom_table":
                errors.append("family 'custom' needs key 'custom_table'")
            continue
        loc = f"line {where[key]}: " if key in where else "default: "
        try:
            val = parser(text_val)
        except ValueError as exc:
            errors.append(f"{loc}{key}: {exc}")
            continue
        msg = check(val) if check else None
        if msg:
            errors.append(f"{loc}{key}: {msg}")
            continue
        values[key] = val

    if exp is not None and fam is not None:
        try:
            errors += _cross_checks(exp, fam, values, where)
        except KeyError:
            pass    # a value it needs failed to parse and is already reported
    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(exp, fam, values, frozenset(raw), base_dir)


def _cross_checks(exp, fam, v, where):
    errors = []

    def loc(key):
        return f"line {where[key]}: " if key in where else "default: "

    horizon = _required_horizon(exp, v)
    if "horizon" in v and exp != "simulate":
        horizon = max(horizon, v["horizon"])
    if fam in ("multistable", "tempered-stable"):
        for p in v["alpha"].check_range(horizon, 0.0, 1.0, name="index"):
            errors.append(f"{loc('alpha')}alpha: {p}")
    if fam == "gamma-like":
        for p in v["alpha"].check_range(horizon, 0.0, math.inf, name="rate"):
            errors.append(f"{loc('alpha')}alpha: {p}")
    if fam == "tempered-stable":
        for p in v["theta"].check_range(horizon, -1e-300, math.inf, name="tempering"):
            errors.append(f"{loc('theta')}theta: {p.replace('-1e-300', '0')}")
    if fam in ("drift-only", "custom") and "drift" in v:
        for p in v["drift"].check_range(horizon, -1e-300, math.inf, name="drift"):
            errors.append(f"{loc('drift')}drift: {p.replace('-1e-300', '0')}")

    if exp == "laplace-check" and v["n_paths"] < 1000:
        errors.append(f"{loc('n_paths')}n_paths: must be at least 1000")
    if exp == "charfun" and v["n_paths"] < 10_000:
        errors.append(f"{loc('n_paths')}n_paths: must be at least 10000")
    if exp in ("laplace-check", "charfun") and v["s"] > v["t"]:
        errors.append(f"{loc('s')}s: must not exceed t")
    if exp == "propagator" and not v["r"] <= v["s"] <= v["t"] - v["h"]:
        errors.append(f"{loc('s')}s: need r <= s <= t - h")
    if exp == "pde" and v["t_start"] >= v["t"]:
        errors.append(f"{loc('t_start')}t_start: must be below t")
    if exp == "localize" and v["r"] <= 0:
        errors.append(f"{loc('r')}r: must be positive")
    if exp == "msd" and v["tail_lo"] >= v["tail_hi"]:
        errors.append(f"{loc('tail_lo')}tail_lo: must be below tail_hi")
    if exp == "propagator" and v["ratio_lo"] >= v["ratio_hi"]:
        errors.append(f"{loc('ratio_lo')}ratio_lo: must be below ratio_hi")
    if exp in ("inverse", "inverse-residual") and fam != "multistable":
        errors.append(f"{loc('family')}family: {exp} needs the multistable family "
                      "(closed-form tail integral)")
    if exp == "localize" and fam not in ("multistable", "tempered-stable"):
        errors.append(f"{loc('family')}family: localize needs a stable-like family")
    return errors


def read_config(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------


def custom_family_from_csv(path, drift=0.0):
    """Family from a CSV table of ``s,t,nu`` on a full rectangular grid.

    ``nu`` is bilinear in ``(s, t)``, zero outside the ``s`` range and held
    constant outside the ``t`` range.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.lstrip().startswith("#"))
        header = next(reader)
        if [h.strip() for h in header] != ["s", "t", "nu"]:
            raise ValueError("custom table header must be s,t,nu")
        for rec in reader:
            if rec:
                rows.append(tuple(float(x) for x in rec))
    arr = np.array(rows)
    s_grid, t_grid = np.unique(arr[:, 0]), np.unique(arr[:, 1])
    if len(arr) != len(s_grid) * len(t_grid):
        raise ValueError("custom table must cover a full (s, t) grid")
    if len(s_grid) < 2 or len(t_grid) < 2:
        raise ValueError("custom table needs at least two s and two t values")
    if s_grid[0] <= 0:
        raise ValueError("custom table s values must be positive")
    table = np.zeros((len(s_grid), len(t_grid)))
    i = np.searchsorted(s_grid, arr[:, 0])
    j = np.searchsorted(t_grid, arr[:, 1])
    table[i, j] = arr[:, 2]
    if np.any(table < 0):
        raise ValueError("custom table has negative density values")
    interp = RegularGridInterpolator((s_grid, t_grid), table, method="linear",
                                     bounds_error=False, fill_value=0.0)

    def density(s, t):
        s = np.asarray(s, dtype=float)
        tt = np.clip(np.broadcast_to(np.asarray(t, dtype=float), s.shape), t_grid[0], t_grid[-1])
        out = interp(np.stack([s.ravel(), tt.ravel()], axis=-1)).reshape(s.shape)
        return out if out.ndim else float(out)

    fam = B.custom(drift, density, name="custom", activity="finite",
                   params={"table": path, "drift": B._as_index(drift)})
    return replace(fam, small_mean=_custom_small_mean(density, s_grid[0]))


def _custom_small_mean(density, s_min):
    def small_mean(g, t):
        if g <= s_min:
            return 0.0
        val, _ = integrate.quad(lambda x: x * float(density(x, t)), s_min, g, limit=200)
        return val
    return small_mean


def build_family(name, values, base_dir="."):
    if name == "multistable":
        return B.multistable(values["alpha"])
    if name == "gamma-like":
        return B.gamma_like(values["alpha"])
    if name == "tempered-stable":
        return B.tempered_stable(values["alpha"], values["theta"])
    if name == "drift-only":
        return B.drift_only(values["drift"])
    if name == "custom":
        path = values["custom_table"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        return custom_family_from_csv(path, values.get("drift", 0.0))
    raise ValueError(f"unknown family {name!r}")
