"""Brownian motion run on a non-homogeneous subordinator clock.

Each coordinate of ``B(u)`` has variance ``u``, so
``E exp(i xi . (B(sigma(t)) - B(sigma(s)))) = exp(-int_s^t f(|xi|^2 / 2, w) dw)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

from .bernstein import DIVERGENT, eval_Pi, is_divergent, mean_jump_rate
from .paths import evaluate, sample_increments, truncated_exponent
from .rng import as_stream

__all__ = [
    "CharfunReport",
    "MsdResult",
    "RegimeReport",
    "TimeChangedSample",
    "charfun_check",
    "classify_regime",
    "hill_estimator",
    "msd_mc",
    "msd_quadrature",
    "sample_subordinate_bm",
    "sample_subordinate_bm_batch",
]

# window index reserved for the Gaussian draws of path i
_BM_WINDOW = 1 << 20


@dataclass
class TimeChangedSample:
    dims: int
    t_eval: np.ndarray
    positions: np.ndarray            # (n_paths, len(t_eval), dims)
    operational_times: np.ndarray    # (n_paths, len(t_eval))


def _gaussian_walk(op_times, dims, gen):
    inc = np.diff(op_times, prepend=0.0)
    z = gen.standard_normal((len(op_times), dims))
    return np.cumsum(np.sqrt(inc)[:, None] * z, axis=0)


def sample_subordinate_bm(path, t_eval, dims, rng):
    """``B(sigma(t))`` along one stored path, ``B(0) = 0``."""
    t_eval = np.asarray(t_eval, dtype=float)
    if np.any(np.diff(t_eval) < 0):
        raise ValueError("t_eval must be nondecreasing")
    op = np.atleast_1d(evaluate(path, t_eval))
    gen = as_stream(rng).at_window(_BM_WINDOW).generator()
    pos = _gaussian_walk(op, dims, gen)
    return TimeChangedSample(dims, t_eval, pos[None], op[None])


def sample_subordinate_bm_batch(family, gamma, t_eval, dims, n_paths, rng, compensate=True,
                                threads=None):
    """Many independent ``B(sigma(t))`` trajectories on ``t_eval`` (starting from ``t = 0``)."""
    t_eval = np.asarray(t_eval, dtype=float)
    grid = np.concatenate(([0.0], t_eval))
    op = sample_increments(family, gamma, grid, n_paths, rng, compensate=compensate,
                           threads=threads)[:, 1:]
    root = as_stream(rng)
    pos = np.empty((n_paths, len(t_eval), dims))
    for i in range(n_paths):
        pos[i] = _gaussian_walk(op[i], dims, root.child(i).at_window(_BM_WINDOW).generator())
    return TimeChangedSample(dims, t_eval, pos, op)


# ---------------------------------------------------------------------------
# characteristic function
# ---------------------------------------------------------------------------


@dataclass
class CharfunReport:
    xi: np.ndarray                 # (k, dims)
    re: np.ndarray
    im: np.ndarray
    se_re: np.ndarray
    se_im: np.ndarray
    target: np.ndarray             # exp(-int_s^t f(|xi|^2/2))
    target_truncated: np.ndarray   # same for the simulated truncated law
    n_paths: int

    def within(self, k=3.0):
        ok_re = np.abs(self.re - self.target_truncated) <= k * np.maximum(self.se_re, 1e-300)
        ok_im = np.abs(self.im) <= k * np.maximum(self.se_im, 1e-300)
        exact = (self.se_re == 0) & (self.re == self.target_truncated)
        return (ok_re | exact) & (ok_im | (self.se_im == 0))


def charfun_check(family, gamma, s, t, xi_grid, n_paths, rng, compensate=False, threads=None):
    """Empirical ``E exp(i xi . (B(sigma(t)) - B(sigma(s))))`` against the symbol."""
    if n_paths < 10_000:
        raise ValueError("n_paths must be at least 1e4")
    xi = np.atleast_2d(np.asarray(xi_grid, dtype=float))
    dims = xi.shape[1]
    if s == t:
        dsig = np.zeros(n_paths)
    else:
        dsig = sample_increments(family, gamma, [s, t], n_paths, rng, compensate=compensate,
                                 threads=threads)[:, 1]
    root = as_stream(rng)
    z = np.empty((n_paths, dims))
    for i in range(n_paths):
        z[i] = root.child(i).at_window(_BM_WINDOW).generator().standard_normal(dims)
    db = np.sqrt(dsig)[:, None] * z
    phase = db @ xi.T
    c, si = np.cos(phase), np.sin(phase)
    sq = np.sqrt(n_paths)
    lam = 0.5 * np.sum(xi ** 2, axis=1)
    target = np.array([np.exp(-eval_Pi(family, float(v), t, s=s)) for v in lam])
    target_tr = np.array([np.exp(-truncated_exponent(family, float(v), gamma, s, t, compensate))
                          for v in lam])
    return CharfunReport(xi, c.mean(0), si.mean(0), c.std(0, ddof=1) / sq,
                         si.std(0, ddof=1) / sq, target, target_tr, n_paths)


# ---------------------------------------------------------------------------
# mean square displacement
# ---------------------------------------------------------------------------


def _rate_probe(family, t, n=17):
    ts = np.linspace(0.0, t, n)
    return [mean_jump_rate(family, float(s)) for s in ts]


def msd_quadrature(family, t, dims=1, tol=1e-10):
    """``E |B(sigma(t))|^2 = n int_0^t (b'(s) + int w nu(dw, s)) ds``, or ``DIVERGENT``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    if any(is_divergent(v) for v in _rate_probe(family, t)):
        return DIVERGENT

    def rate(s):
        m = mean_jump_rate(family, s)
        if is_divergent(m):
            raise ValueError("mean jump rate diverges inside the interval")
        return float(family.drift_rate(s)) + m

    val, err = integrate.quad(rate, 0.0, t, epsabs=tol, epsrel=tol, limit=200)
    return dims * val


def hill_estimator(samples, k=None):
    """Hill tail index from the ``k`` largest samples (default 1% of them)."""
    x = np.sort(np.asarray(samples, dtype=float))[::-1]
    x = x[x > 0]
    if k is None:
        k = max(10, len(x) // 100)
    if k >= len(x):
        raise ValueError("k must be smaller than the number of positive samples")
    return 1.0 / float(np.mean(np.log(x[:k]) - np.log(x[k])))


@dataclass
class MsdResult:
    t: float
    divergent: bool
    estimate: Optional[float] = None
    se: Optional[float] = None
    target: object = None
    tail_index: Optional[float] = None
    tail_k: Optional[int] = None


def msd_mc(family, gamma, t, dims, n_paths, rng, compensate=True, threads=None):
    """MC mean of ``|B(sigma(t))|^2``, or a Hill tail diagnostic when the MSD diverges."""
    target = msd_quadrature(family, t, dims)
    sig = sample_increments(family, gamma, [0.0, t], n_paths, rng, compensate=compensate,
                            threads=threads)[:, 1]
    if is_divergent(target):
        k = max(10, n_paths // 100)
        return MsdResult(t, True, target=target, tail_index=hill_estimator(sig, k), tail_k=k)
    root = as_stream(rng)
    chi = np.empty(n_paths)
    for i in range(n_paths):
        z = root.child(i).at_window(_BM_WINDOW).generator().standard_normal(dims)
        chi[i] = z @ z
    sq = sig * chi
    return MsdResult(t, False, float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_paths)),
                     target)


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------


@dataclass
class RegimeReport:
    verdict: str          # diffusive | superdiffusive | subdiffusive | infinite | inconclusive
    constant: Optional[float]
    probes: list = field(default_factory=list)     # (t, rate) pairs
    reason: str = ""


def classify_regime(family, t_probe_max=1024.0, dims=1):
    """Long-time MSD regime from the mean jump rate on ``t = 1, 2, 4, ..., t_probe_max``.

    Thresholds: the last three probes within 1% means convergent; a monotone
    change by more than 10x across the range means growth or decay.
    """
    ts = [1.0]
    while ts[-1] * 2 <= t_probe_max:
        ts.append(ts[-1] * 2)
    vals = []
    for t in ts:
        m = mean_jump_rate(family, t)
        if is_divergent(m):
            return RegimeReport("infinite", None, list(zip(ts[:len(vals)], vals)) + [(t, m)],
                                f"mean jump rate diverges at t={t:g}")
        vals.append(float(family.drift_rate(t)) + m)
    probes = list(zip(ts, vals))
    v = np.array(vals)
    last = v[-3:]
    if len(v) >= 3 and last.min() > 0 and (last.max() - last.min()) <= 0.01 * last.max():
        return RegimeReport("diffusive", dims * float(v[-1]), probes,
                            "last three probes agree within 1%")
    diffs = np.diff(v)
    if v[0] > 0 and v[-1] > 10 * v[0] and np.all(diffs >= 0):
        return RegimeReport("superdiffusive", None, probes, "monotone growth by more than 10x")
    if v[-1] < v[0] / 10 and np.all(diffs <= 0):
        return RegimeReport("subdiffusive", None, probes, "monotone decay by more than 10x")
    return RegimeReport("inconclusive", None, probes, "probes neither settle nor move monotonically 10x")
