"""Experiment runner: one config in, ``results.csv`` + ``summary.txt`` out.

Artifacts go to ``<outdir>/<experiment>-<seed>/``.  They are written to a
scratch directory first and moved into place only when the run completes,
so a failed run leaves nothing behind.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error,
3 numeric failure.
"""

from __future__ import annotations

import itertools
import os
import shutil
import sys
import tempfile
import traceback
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from . import fracpde, inverse, paths, propagator, stable, subordinate_bm
from .bernstein import is_divergent
from .config import ConfigError, ExperimentConfig
from .rng import RngStream

__all__ = ["Check", "Outcome", "EXIT_PASS", "EXIT_FAIL", "EXIT_CONFIG", "EXIT_NUMERIC",
           "NumericFailure", "run", "run_experiment"]

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# substream indices for draws that are not per-path subordinator streams
_S_PATHS, _S_PATH0, _S_INIT, _S_MC, _S_INV, _S_VEC, _S_EXACT = range(7)


class NumericFailure(RuntimeError):
    """A numeric module raised; ``module`` names where."""

    def __init__(self, module, exc):
        self.module = module
        self.exc = exc
        super().__init__(f"{module}: {type(exc).__name__}: {exc}")


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    rule: str       # how value is obtained from results.csv and compared with tol


@dataclass
class Outcome:
    columns: list
    rows: list
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)   # file name -> writer(path)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _stream(cfg, sub):
    return RngStream(cfg.seed, sub)


def _le(name, value, tol, rule):
    value = float(value)
    return Check(name, value, tol, bool(np.isfinite(value) and value <= tol), rule)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _simulate(cfg, fam, threads):
    times = np.linspace(0.0, cfg["horizon"], cfg["n_eval"])
    sig = paths.sample_increments(fam, cfg["gamma"], times, cfg["n_paths"],
                                  _stream(cfg, _S_PATHS), compensate=cfg["compensate"],
                                  threads=threads)
    rows = [(i, t, v) for i in range(sig.shape[0]) for t, v in zip(times, sig[i])]
    steps = np.diff(sig, axis=1)
    checks = [
        Check("nondecreasing", max(0.0, -float(steps.min())), 0.0, bool(steps.min() >= 0),
              "max over paths of the largest drop sigma(t_k) - sigma(t_{k+1}); must be 0"),
        Check("starts_at_zero", float(np.abs(sig[:, 0]).max()), 0.0,
              bool(np.all(sig[:, 0] == 0)), "max |sigma| at t = 0; must be 0"),
    ]
    path0 = paths.simulate_path(fam, cfg["gamma"], cfg["horizon"], _stream(cfg, _S_PATH0),
                                compensate=cfg["compensate"])
    info = {"mean_at_horizon": float(sig[:, -1].mean()),
            "path0_jumps": path0.n_jumps}
    return Outcome(["path", "t", "sigma"], rows, checks, info,
                   {"path-0.csv": lambda p: paths.write_path_csv(path0, p)})


def _laplace(cfg, fam, threads):
    est = paths.increment_laplace_mc(fam, cfg["gamma"], cfg["s"], cfg["t"], cfg["lambdas"],
                                     cfg["n_paths"], _stream(cfg, _S_PATHS),
                                     compensate=cfg["compensate"], threads=threads)
    rows, checks = [], []
    for lam, e, se, tg, tt in zip(est.lams, est.estimate, est.se, est.target,
                                  est.target_truncated):
        if se > 0:
            z = abs(e - tt) / se
            checks.append(_le(f"z_lam{lam:g}", z, cfg["tol_sigma"],
                              "|estimate - target_truncated| / se"))
        else:
            # deterministic increment: compare to the exact exponent
            rel = abs(e - tt) / max(tt, 1e-300)
            z = 0.0 if rel == 0 else np.inf
            checks.append(_le(f"deterministic_lam{lam:g}", rel, 1e-8,
                              "|estimate - target_truncated| / target_truncated (se = 0)"))
        rows.append((lam, e, se, tg, tt, z))
    return Outcome(["lambda", "estimate", "se", "target", "target_truncated", "abs_z"], rows,
                   checks, {"n_paths": est.n_paths})


def _constant_reference(fam, x, t):
    """Closed-form density of sigma(t) for constant-parameter families, else None."""
    if fam.name == "multistable" and fam.params["alpha"].is_constant:
        return stable.pdf(x, float(fam.params["alpha"](0.0)), scale=t)
    if fam.name == "gamma-like" and fam.params["alpha"].is_constant:
        a = float(fam.params["alpha"](0.0))
        return stats.gamma.pdf(x, t, scale=1.0 / a)
    return None


def _pde_solve(cfg, fam, n_x):
    grid = fracpde.SpaceTimeGrid(cfg["x_max"], n_x, cfg["t"], cfg["n_t"])
    init = fracpde.initial_density(fam, grid, cfg["t_start"], rng=_stream(cfg, _S_INIT),
                                   n_paths=cfg["n_paths"], gamma=cfg["gamma"])
    return fracpde.solve_forward(fam, grid, init, cfg["t_start"], save_times=[cfg["t"]],
                                 max_outflow=cfg["max_outflow"])


def _pde(cfg, fam, threads):
    t = cfg["t"]
    fld = _pde_solve(cfg, fam, cfg["n_x"])
    x, q = fld.x, fld.at(t)
    ref = _constant_reference(fam, x, t)
    info = {"escaped_mass": float(fld.escaped[-1]), "min_value": fld.min_value}
    extra = {"field.bin": lambda p: fracpde.write_density_binary(fld, p)}
    if ref is not None:
        mask = (x >= cfg["x_lo"]) & (x <= cfg["x_max"])
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(ref > 0, np.abs(q - ref) / ref, np.nan)
        rows = [(xi, qi, ri, fi, ei, bool(mi))
                for xi, qi, ri, fi, ei, mi in zip(x, q, fld.raw[:, -1], ref, rel, mask)]
        err = float(np.nanmax(rel[mask]))
        checks = [_le("linf_rel_error", err, cfg["tol_rel"],
                      "max of rel_error over rows with in_range = true")]
        if cfg["refine"]:
            fine = _pde_solve(cfg, fam, 2 * cfg["n_x"])
            xf, qf = fine.x, fine.at(t)
            rf = _constant_reference(fam, xf, t)
            mf = (xf >= cfg["x_lo"]) & (xf <= cfg["x_max"])
            err_f = float(np.max(np.abs(qf[mf] - rf[mf]) / rf[mf]))
            factor = err / err_f
            info["linf_rel_error_refined"] = err_f
            checks.append(Check("refinement_factor", factor, cfg["min_refine_factor"],
                                bool(factor >= cfg["min_refine_factor"]),
                                "linf_rel_error / linf_rel_error_refined; must be >= tol"))
        return Outcome(["x", "q", "q_raw", "reference", "rel_error", "in_range"], rows,
                       checks, info, extra)
    # no closed form: compare CDFs with Monte Carlo
    mc = paths.sample_increments(fam, cfg["gamma"], [0.0, t], cfg["n_paths"],
                                 _stream(cfg, _S_MC), compensate=True, threads=threads)[:, 1]
    mc.sort()
    edges = x + 0.5 * fld.grid.dx
    cdf_pde = fld.cdf(t)
    cdf_mc = np.searchsorted(mc, edges, side="right") / len(mc)
    rows = [(e, a, b) for e, a, b in zip(edges, cdf_pde, cdf_mc)]
    ks = float(np.max(np.abs(cdf_pde - cdf_mc)))
    return Outcome(["x_edge", "cdf_pde", "cdf_mc"], rows,
                   [_le("sup_cdf_distance", ks, cfg["tol_ks"], "max |cdf_pde - cdf_mc|")],
                   info, extra)


def _inverse(cfg, fam, threads):
    t = cfg["t"]
    xs, l = inverse.inverse_density_grid(fam, t, cfg["x_max"], cfg["n_x"], cfg["n_s"],
                                         cfg["t_start"], cfg["max_outflow"])
    cdf_grid = np.concatenate(([0.0], np.cumsum(0.5 * (l[1:] + l[:-1]) * np.diff(xs))))
    res = inverse.sample_inverse(fam, cfg["gamma"], [t], cfg["n_paths"], _stream(cfg, _S_INV))
    s = np.sort(res.samples[:, 0][np.isfinite(res.samples[:, 0])])
    cdf_mc = np.searchsorted(s, xs, side="right") / len(s)
    rows = [(x, a, b, c) for x, a, b, c in zip(xs, l, cdf_grid, cdf_mc)]
    checks = [_le("ks_formula_vs_mc", np.max(np.abs(cdf_grid - cdf_mc)), cfg["tol_ks"],
                  "max |cdf_formula - cdf_mc|")]
    info = {"exhausted_passages": res.exhausted}
    alpha = fam.params["alpha"]
    if alpha.is_constant:
        a = float(alpha(0.0))
        xp = cfg["x_probe"]
        val = inverse.inverse_density_formula(lambda s_, x_: stable.pdf(s_, a, scale=x_), fam,
                                              xp, t)
        info["formula_at_probe"] = val
        if a == 0.5:
            exact = float(np.exp(-xp ** 2 / (4 * t)) / np.sqrt(np.pi * t))
            info["closed_form_at_probe"] = exact
            checks.append(_le("formula_rel_error", abs(val - exact) / exact, cfg["tol_rel"],
                              "|formula_at_probe - closed_form_at_probe| / closed_form_at_probe"))
    return Outcome(["x", "l_formula", "cdf_formula", "cdf_mc"], rows, checks, info)


def _inverse_residual(cfg, fam, threads):
    fld = inverse.inverse_density_field(fam, cfg["t_max"], cfg["n_t"], cfg["x_max"], cfg["n_x"],
                                        cfg["t_start"], cfg["max_outflow"])
    probes = list(itertools.product(cfg["probes"], cfg["probes"]))
    rep = inverse.inverse_equation_residual(fld, fam, probes)
    rows = [(xp, tp, *row) for (xp, tp), row in zip(probes, rep.terms)]
    checks = [Check("residual_within_scale", rep.residual, rep.scale, rep.residual <= rep.scale,
                    "max |residual| <= scale = h * max|dl_dx, d_rl, b_term| / min probe")]
    bound = cfg["tol_b"] * rep.scale
    if fam.params["alpha"].is_constant:
        checks.append(Check("b_term_zero", rep.b_max, bound, rep.b_max <= bound,
                            "max |b_term| <= tol_b * scale"))
    else:
        checks.append(Check("b_term_nonzero", rep.b_max, bound, rep.b_max > bound,
                            "max |b_term| > tol_b * scale"))
    return Outcome(["x", "t", "dl_dx", "d_rl", "b_term", "residual"], rows, checks,
                   {"scale": rep.scale})


def _propagator(cfg, fam, threads):
    if cfg.get("operator_file"):
        path = cfg["operator_file"]
        if not os.path.isabs(path):
            path = os.path.join(cfg.base_dir, path)
        A = propagator.read_eigenpairs_csv(path)
    else:
        A = propagator.dirichlet_laplacian(cfg["nodes"], cfg["length"])
    u = _stream(cfg, _S_VEC).generator().standard_normal(A.dim)
    r, s, t, tol = cfg["r"], cfg["s"], cfg["t"], cfg["tol"]
    law = propagator.check_propagator_law(A, fam, r, s, t, u, tol)
    Tu = propagator.apply_propagator(A, fam, s, t, u, tol)
    nu = np.linalg.norm(u)
    contraction = max(0.0, np.linalg.norm(Tu) - nu) / nu
    comm = np.linalg.norm(propagator.apply_propagator(A, fam, s, t, A.apply(u), tol)
                          - A.apply(Tu)) / max(np.linalg.norm(A.apply(u)), 1e-300)
    spec = propagator.generator_spectral(A, fam, t, u)
    phil = propagator.generator_phillips(A, fam, t, u, tol=cfg["gen_tol"])
    gen = np.abs(phil - spec).max() / max(np.abs(spec).max(), 1e-300)
    h = cfg["h"]
    defects = [propagator.check_evolution(A, fam, s, t, u, h / 2 ** k) for k in range(3)]
    ratios = [defects[k] / defects[k + 1] for k in range(2)]
    lo, hi = cfg["ratio_lo"], cfg["ratio_hi"]
    checks = [
        _le("law_residual", law, cfg["tol_law"], "value"),
        _le("contraction_excess", contraction, cfg["tol_contract"], "value"),
        _le("commutation_residual", comm, cfg["tol_contract"], "value"),
        _le("generator_rel_error", gen, cfg["tol_gen"], "value"),
    ]
    for k, q in enumerate(ratios):
        checks.append(Check(f"evolution_ratio_{k}", q, hi, bool(lo <= q <= hi),
                            f"defect_h{k} / defect_h{k + 1} within [{lo:g}, {hi:g}]"))
    rows = [(c.name, c.value) for c in checks[:4]]
    rows += [(f"defect_h{k}", d) for k, d in enumerate(defects)]
    rows += [(c.name, c.value) for c in checks[4:]]
    exps = propagator.propagator_exponents(A, fam, s, t, tol)
    extra = {"eigenpairs.csv": lambda p: propagator.write_eigenpairs_csv(A, p),
             "exponents.csv": lambda p: _write_csv(p, ["index", "eigenvalue", "exponent"],
                                                   list(zip(range(A.dim), A.eigenvalues, exps)),
                                                   [])}
    return Outcome(["quantity", "value"], rows, checks, {"dim": A.dim}, extra)


def _msd(cfg, fam, threads):
    rows, checks = [], []
    for m, t in enumerate(cfg["t_values"]):
        res = subordinate_bm.msd_mc(fam, cfg["gamma"], t, cfg["dims"], cfg["n_paths"],
                                    RngStream(cfg.seed, 16 + m), threads=threads)
        if res.divergent:
            rows.append((t, np.nan, np.nan, "divergent", res.tail_index))
            lo, hi = cfg["tail_lo"], cfg["tail_hi"]
            checks.append(Check(f"tail_index_t{t:g}", res.tail_index, hi,
                                bool(lo < res.tail_index < hi),
                                f"tail_index within ({lo:g}, {hi:g})"))
        else:
            z = abs(res.estimate - res.target) / res.se
            rows.append((t, res.estimate, res.se, res.target, np.nan))
            checks.append(_le(f"z_t{t:g}", z, cfg["tol_sigma"], "|msd_estimate - target| / se"))
    reg = subordinate_bm.classify_regime(fam, cfg["t_probe_max"], cfg["dims"])
    info = {"regime": reg.verdict, "regime_reason": reg.reason}
    if reg.constant is not None:
        info["regime_constant"] = reg.constant
    extra = {"regime.csv": lambda p: _write_csv(
        p, ["t", "rate"], [(a, "divergent" if is_divergent(b) else b) for a, b in reg.probes],
        [f"verdict={reg.verdict}"])}
    return Outcome(["t", "msd_estimate", "se", "target", "tail_index"], rows, checks, info, extra)


def _charfun(cfg, fam, threads):
    rep = subordinate_bm.charfun_check(fam, cfg["gamma"], cfg["s"], cfg["t"], cfg["xi"],
                                       cfg["n_paths"], _stream(cfg, _S_PATHS),
                                       compensate=cfg["compensate"], threads=threads)
    rows, checks = [], []
    k = cfg["tol_sigma"]
    for n, xi in enumerate(rep.xi):
        label = " ".join(repr(float(v)) for v in xi)
        rows.append((label, rep.re[n], rep.im[n], rep.target_truncated[n], rep.se_re[n],
                     rep.se_im[n], rep.target[n]))
        ok = bool(rep.within(k)[n])
        dev = max(abs(rep.re[n] - rep.target_truncated[n]) / max(rep.se_re[n], 1e-300),
                  abs(rep.im[n]) / max(rep.se_im[n], 1e-300)) if rep.se_re[n] > 0 else 0.0
        checks.append(Check(f"xi{n}", dev, k, ok,
                            "max(|re - target_re| / se, |im| / se_im)"))
    return Outcome(["xi", "re", "im", "target_re", "se", "se_im", "target_exact"], rows, checks,
                   {"n_paths": rep.n_paths})


def _localize(cfg, fam, threads):
    t0 = cfg["t0"]
    inc = paths.localize_increments(fam, t0, cfg["r"], cfg["T"], cfg["n_paths"],
                                    _stream(cfg, _S_PATHS), gamma0=cfg["gamma0"], threads=threads)
    a0 = float(fam.power_law(t0))
    exact = stable.sample(a0, cfg["n_paths"], _stream(cfg, _S_EXACT).generator(), scale=cfg["T"])
    ks = stats.ks_2samp(inc, exact).statistic
    rows = list(zip(range(len(inc)), np.sort(inc), np.sort(exact)))
    return Outcome(["rank", "rescaled_increment", "stable_draw"], rows,
                   [_le("ks_two_sample", ks, cfg["tol_ks"],
                        "two-sample KS statistic of the two columns")],
                   {"alpha_t0": a0})


_RUNNERS = {
    "simulate": _simulate,
    "laplace-check": _laplace,
    "pde": _pde,
    "inverse": _inverse,
    "inverse-residual": _inverse_residual,
    "propagator": _propagator,
    "msd": _msd,
    "charfun": _charfun,
    "localize": _localize,
}


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _write_csv(path, columns, rows, meta):
    lines = ["# nhsub v1"] + [f"# {m}" for m in meta] + [",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _summary_lines(cfg, out, status):
    lines = [f"experiment={cfg.experiment}", f"family={cfg.family}", f"seed={cfg.seed}"]
    for key, val in sorted(out.info.items()):
        lines.append(f"info.{key}={_fmt(val)}")
    for c in out.checks:
        lines += [f"check.{c.name}.value={_fmt(c.value)}", f"check.{c.name}.tol={_fmt(c.tol)}",
                  f"check.{c.name}.rule={c.rule}",
                  f"check.{c.name}.pass={_fmt(c.passed)}"]
    lines += [f"checks_passed={sum(c.passed for c in out.checks)}/{len(out.checks)}",
              f"status={'pass' if status == EXIT_PASS else 'fail'}", f"exit_code={status}"]
    return lines


def _numeric_module(exc):
    for frame in reversed(traceback.extract_tb(exc.__traceback__)):
        name = os.path.splitext(os.path.basename(frame.filename))[0]
        if os.sep + "nhsub" + os.sep in frame.filename and name not in ("experiments",):
            return f"nhsub.{name}"
    return "nhsub.experiments"


def run_experiment(cfg: ExperimentConfig, threads=None) -> Outcome:
    """Run the numeric part only; numeric errors are wrapped in :class:`NumericFailure`."""
    try:
        fam = cfg.build_family()
    except (OSError, ValueError) as exc:
        raise ConfigError([f"family: {exc}"]) from exc
    try:
        with np.errstate(over="ignore", under="ignore"):
            return _RUNNERS[cfg.experiment](cfg, fam, threads)
    except (ArithmeticError, ValueError, RuntimeError, KeyError) as exc:
        raise NumericFailure(_numeric_module(exc), exc) from exc


def run(cfg: ExperimentConfig, outdir=None, seed=None, threads=None, log=None):
    """Run ``cfg`` and write artifacts; returns ``(exit_code, directory or None)``."""
    log = log or (lambda msg: print(msg, file=sys.stderr))
    cfg = cfg.with_overrides(seed=seed, outdir=outdir)
    if threads is None:
        threads = cfg.get("threads")
    base = cfg["outdir"]
    if not os.path.isabs(base):
        base = os.path.abspath(base)
    os.makedirs(base, exist_ok=True)
    final = os.path.join(base, f"{cfg.experiment}-{cfg.seed}")
    scratch = tempfile.mkdtemp(prefix=f".{cfg.experiment}-{cfg.seed}.", dir=base)
    try:
        try:
            out = run_experiment(cfg, threads)
        except ConfigError as exc:
            for e in exc.errors:
                log(f"config error: {e}")
            shutil.rmtree(scratch, ignore_errors=True)
            return EXIT_CONFIG, None
        except NumericFailure as exc:
            log(f"numeric failure in {exc}")
            shutil.rmtree(scratch, ignore_errors=True)
            return EXIT_NUMERIC, None
        status = EXIT_PASS if all(c.passed for c in out.checks) else EXIT_FAIL
        meta = [f"experiment={cfg.experiment}"] + [f"config: {ln}" for ln in cfg.canonical()]
        _write_csv(os.path.join(scratch, "results.csv"), out.columns, out.rows, meta)
        for name, writer in sorted(out.extra.items()):
            writer(os.path.join(scratch, name))
        with open(os.path.join(scratch, "summary.txt"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write("\n".join(_summary_lines(cfg, out, status)) + "\n")
        if os.path.isdir(final):
            shutil.rmtree(final)
        os.replace(scratch, final)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    for c in out.checks:
        log(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.6g} (tol {c.tol:g})")
    return status, final
