"""Compound-Poisson simulation of non-homogeneous subordinators.

Jumps larger than a truncation level ``gamma`` arrive as a non-homogeneous
Poisson process with intensity ``nubar(gamma, t)``, generated by thinning
against a piecewise-constant majorant; each accepted jump at time ``t`` has
law ``nu(dx, t) 1{x > gamma} / nubar(gamma, t)``.

Every path ``i`` draws from its own counter-based substream, so results do
not depend on batching or thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.optimize.elementwise import find_root

from . import stable
from .bernstein import (LevyFamily, eval_Pi, small_jump_exponent, small_jump_mean,
                        TimeVaryingIndex)
from .rng import RngStream, as_stream

__all__ = [
    "HorizonExhausted",
    "IntensityError",
    "LaplaceEstimate",
    "MajorantError",
    "SubordinatorPath",
    "evaluate",
    "increment_laplace_mc",
    "jump_quantile",
    "localize_increments",
    "nhpp_counts",
    "piecewise_stable_path",
    "piecewise_stable_samples",
    "read_path_csv",
    "sample_increments",
    "sample_jump",
    "sample_nhpp_times",
    "simulate_path",
    "write_path_csv",
]

N_SUB = 64
N_PROBE = 16
SAFETY = 1.01
DEFAULT_GAMMA = 1e-6
DRIFT_NODES = 2049


class IntensityError(ValueError):
    """The truncated jump intensity is unbounded on a sub-interval."""


class MajorantError(RuntimeError):
    """A thinning candidate exceeded the piecewise-constant majorant."""


class HorizonExhausted(RuntimeError):
    """The requested level is not reached within the simulated horizon."""


def _threads(threads):
    if threads is None:
        threads = int(os.environ.get("NHSUB_THREADS", "1") or 1)
    return max(1, int(threads))


# ---------------------------------------------------------------------------
# vectorised family helpers
# ---------------------------------------------------------------------------


def _tail_at(family, g, t):
    t = np.asarray(t, dtype=float)
    if family.tail_closed:
        return np.broadcast_to(np.asarray(family.tail(g, t), dtype=float), t.shape).copy()
    return np.array([float(family.tail(g, float(ti))) for ti in t.ravel()]).reshape(t.shape)


def _small_mean_at(family, g, t):
    t = np.asarray(t, dtype=float)
    if family.small_mean is not None:
        return np.broadcast_to(np.asarray(family.small_mean(g, t), dtype=float), t.shape).copy()
    return np.array([small_jump_mean(family, g, float(ti)) for ti in t.ravel()]).reshape(t.shape)


def _jump_quantile(family, g, t, u):
    """x with P(X > x) = u under the truncated jump law at times t."""
    t = np.asarray(t, dtype=float)
    u = np.asarray(u, dtype=float)
    if t.size == 0:
        return np.empty(0)
    if family.jump_quantile is not None:
        return np.asarray(family.jump_quantile(u, g, t), dtype=float)
    base = _tail_at(family, g, t)
    if np.any(base <= 0):
        raise ValueError("no jumps above the truncation level (nubar(gamma, t) = 0)")
    target = np.log(u) + np.log(base)

    if family.tail_closed:
        def logtail(y, tt):
            with np.errstate(divide="ignore"):
                return np.log(np.asarray(family.tail(np.exp(y), tt), dtype=float))
    else:
        def logtail(y, tt):
            with np.errstate(divide="ignore"):
                return np.log(np.array([float(family.tail(float(np.exp(yi)), float(ti)))
                                        for yi, ti in zip(np.ravel(y), np.ravel(tt))]
                                       ).reshape(np.shape(y)))

    lo = np.full(t.shape, np.log(g))
    step = np.ones(t.shape)
    hi = lo + step
    for _ in range(200):
        open_ = logtail(hi, t) - target >= 0
        if not open_.any():
            break
        step = np.where(open_, 2 * step, step)
        lo = np.where(open_, hi, lo)
        hi = np.where(open_, hi + step, hi)
    res = find_root(lambda y, tt, tg: logtail(y, tt) - tg, (lo, hi), args=(t, target),
                    tolerances=dict(xatol=1e-12, xrtol=1e-14), maxiter=200)
    return np.exp(res.x)


def _majorant(family, g, lo, hi):
    edges = np.linspace(lo, hi, N_SUB + 1)
    width = edges[1] - edges[0]
    probes = edges[:-1, None] + width * np.linspace(0.0, 1.0, N_PROBE)[None, :]
    vals = _tail_at(family, g, probes)
    bad = ~np.isfinite(vals).all(axis=1)
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise IntensityError(
            f"unbounded jump intensity nubar({g:g}, t) on sub-interval "
            f"[{edges[j]:.6g}, {edges[j + 1]:.6g}]")
    return edges, SAFETY * vals.max(axis=1)


def _drift_table(family, g, lo, hi, compensate):
    ts = np.linspace(lo, hi, DRIFT_NODES)
    rate = np.broadcast_to(np.asarray(family.drift_rate(ts), dtype=float), ts.shape).copy()
    if compensate and family.has_jumps:
        rate = rate + _small_mean_at(family, g, ts)
    if np.ptp(rate) == 0.0:
        return np.array([lo, hi]), np.array([0.0, rate[0] * (hi - lo)])
    return ts, integrate.cumulative_trapezoid(rate, ts, initial=0.0)


def _draw_window(family, g, lo, hi, streams):
    """Thinning draws for several paths on ``[lo, hi]``.

    Returns per-path accepted counts and the concatenated (path, time, size)
    arrays, unsorted within each path.  A family with a ``proposal`` draws
    candidate jumps from the dominating family and keeps each one with
    probability ``accept_ratio(x, t)``.
    """
    marked = family.proposal is not None and family.jump_quantile is None
    source = family.proposal if marked else family
    edges, gmax = _majorant(source, g, lo, hi)
    width = edges[1] - edges[0]
    rates = gmax * width
    n_u = 4 if marked else 3
    counts, draws = [], []
    for st in streams:
        gen = st.generator()
        c = gen.poisson(rates)
        counts.append(c)
        draws.append(gen.random(n_u * int(c.sum())))
    n_per = np.array([int(c.sum()) for c in counts], dtype=np.int64)
    if n_per.sum() == 0:
        empty = np.empty(0)
        return np.zeros(len(streams), dtype=np.int64), np.empty(0, dtype=np.int64), empty, empty
    sub = np.concatenate([np.repeat(np.arange(N_SUB), c) for c in counts])
    pid = np.repeat(np.arange(len(streams)), n_per)
    u = [np.concatenate([d[k * n:(k + 1) * n] for d, n in zip(draws, n_per)])
         for k in range(n_u)]
    cand = edges[sub] + width * u[0]
    bound = gmax[sub]
    gval = _tail_at(source, g, cand)
    if np.any(gval > bound):
        k = int(np.argmax(gval > bound))
        raise MajorantError(
            f"intensity {gval[k]:.6g} exceeds majorant {bound[k]:.6g} at t={cand[k]:.6g}")
    acc = u[1] * bound < gval
    times = cand[acc]
    sizes = _jump_quantile(source, g, times, np.minimum(1.0 - u[2][acc], 1.0 - 2.0 ** -53))
    pid = pid[acc]
    if marked:
        keep = u[3][acc] < family.accept_ratio(sizes, times)
        times, sizes, pid = times[keep], sizes[keep], pid[keep]
    return np.bincount(pid, minlength=len(streams)), pid, times, sizes


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubordinatorPath:
    """One trajectory: drift table plus time-sorted jump records."""

    jump_times: np.ndarray
    jump_sizes: np.ndarray
    drift_times: np.ndarray
    drift_values: np.ndarray
    horizon: float
    truncation: float
    family_id: str = ""
    seed: Optional[int] = None
    stream: Optional[int] = None
    windows: int = 1
    prefix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "prefix", np.concatenate(([0.0], np.cumsum(self.jump_sizes))))

    @property
    def n_jumps(self):
        return len(self.jump_times)

    def drift(self, t):
        return np.interp(t, self.drift_times, self.drift_values)

    def drift_inverse(self, level):
        """``inf {s : b(s) > level}`` on the tabulated drift, ``inf`` if never."""
        bt, bv = self.drift_times, self.drift_values
        if level < bv[0]:
            return float(bt[0])
        k = int(np.searchsorted(bv, level, side="right"))
        if k >= len(bv):
            return np.inf
        b0, b1 = bv[k - 1], bv[k]
        t0, t1 = bt[k - 1], bt[k]
        return float(t0 + (level - b0) * (t1 - t0) / (b1 - b0))

    def __call__(self, t):
        return evaluate(self, t)


def evaluate(path, t):
    """``b(t)`` plus the sum of jumps with time ``<= t``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > path.horizon * (1 + 1e-12)):
        raise ValueError(f"evaluation time outside [0, {path.horizon:g}]")
    k = np.searchsorted(path.jump_times, t_arr, side="right")
    out = path.drift(t_arr) + path.prefix[k]
    return float(out) if out.ndim == 0 else out


def _path_windows(horizon, windows):
    """Window edges for a path simulated on ``horizon`` after ``windows - 1`` doublings."""
    base = horizon / 2 ** (windows - 1)
    return [0.0] + [base * 2 ** k for k in range(windows)]


def simulate_path(family, gamma, horizon, rng, compensate=False):
    """Truncated compound-Poisson path on ``[0, horizon]``.

    With ``compensate`` the mean of the discarded jumps ``int_0^gamma x nu(dx, t)``
    is added to the drift.
    """
    if gamma <= 0 or horizon <= 0:
        raise ValueError("need gamma > 0 and horizon > 0")
    stream = as_stream(rng)
    _, _, times, sizes = _draw_window(family, gamma, 0.0, horizon, [stream])
    order = np.argsort(times, kind="stable")
    dt, dv = _drift_table(family, gamma, 0.0, horizon, compensate)
    return SubordinatorPath(times[order], sizes[order], dt, dv, float(horizon), float(gamma),
                            family.describe(), stream.master_seed, stream.stream_index)


def extend_path(path, family, rng, compensate=False):
    """Double the horizon, drawing the new window from the next window substream."""
    stream = as_stream(rng)
    lo, hi = path.horizon, 2 * path.horizon
    win = stream.at_window(path.windows)
    _, _, times, sizes = _draw_window(family, path.truncation, lo, hi, [win])
    order = np.argsort(times, kind="stable")
    dt, dv = _drift_table(family, path.truncation, lo, hi, compensate)
    return SubordinatorPath(
        np.concatenate((path.jump_times, times[order])),
        np.concatenate((path.jump_sizes, sizes[order])),
        np.concatenate((path.drift_times, dt[1:])),
        np.concatenate((path.drift_values, path.drift_values[-1] + dv[1:])),
        hi, path.truncation, path.family_id, path.seed, path.stream, path.windows + 1)


def sample_nhpp_times(family, gamma, horizon, rng):
    """Event times of the Poisson process with intensity ``nubar(gamma, t)``."""
    _, _, times, _ = _draw_window(family, gamma, 0.0, horizon, [as_stream(rng)])
    return np.sort(times)


def nhpp_counts(family, gamma, horizon, n_paths, rng):
    """Event counts on ``[0, horizon]`` for paths ``rng.child(i)``, ``i < n_paths``."""
    root = as_stream(rng)
    counts = np.empty(n_paths, dtype=np.int64)
    for start in range(0, n_paths, 1024):
        streams = [root.child(i) for i in range(start, min(start + 1024, n_paths))]
        counts[start:start + len(streams)] = _draw_window(family, gamma, 0.0, horizon,
                                                          streams)[0]
    return counts


def jump_quantile(family, gamma, t, u):
    """``x`` with ``nubar(x, t) = u nubar(gamma, t)``, i.e. ``P(X > x) = u`` for the truncated law."""
    t = np.asarray(t, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), t.shape)
    if np.any((u <= 0) | (u > 1)):
        raise ValueError("u must lie in (0, 1]")
    out = _jump_quantile(family, gamma, t.ravel(), u.ravel()).reshape(t.shape)
    return float(out) if out.ndim == 0 else out


def sample_jump(family, gamma, t, rng, size=None):
    """Draw(s) from the truncated jump law at time ``t``."""
    gen = rng if isinstance(rng, np.random.Generator) else as_stream(rng).generator()
    if float(np.min(_tail_at(family, gamma, np.atleast_1d(t)))) <= 0:
        raise ValueError("nubar(gamma, t) = 0: no jumps above the truncation level")
    u = gen.random(size)
    u = np.minimum(1.0 - np.asarray(u), 1.0 - 2.0 ** -53)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), np.shape(u))
    out = _jump_quantile(family, gamma, t_arr.ravel(), u.ravel()).reshape(np.shape(u))
    return float(out) if out.ndim == 0 else out


def sample_increments(family, gamma, times, n_paths, rng, compensate=False,
                      chunk=128, threads=None):
    """``sigma(times[k]) - sigma(times[0])`` for ``n_paths`` independent paths.

    Only the window ``[times[0], times[-1]]`` is simulated; path ``i`` uses
    substream ``rng.child(i)``.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) < 0):
        raise ValueError("times must be a nondecreasing sequence of length >= 2")
    root = as_stream(rng)
    lo, hi = float(times[0]), float(times[-1])
    m = len(times)
    out = np.zeros((n_paths, m))
    if hi == lo:
        return out
    dt, dv = _drift_table(family, gamma, lo, hi, compensate)
    drift = np.interp(times, dt, dv)

    def work(start):
        ids = range(start, min(start + chunk, n_paths))
        streams = [root.child(i) for i in ids]
        _, pid, t_j, x_j = _draw_window(family, gamma, lo, hi, streams)
        b = np.searchsorted(times, t_j, side="left")
        acc = np.bincount(pid * m + b, weights=x_j, minlength=len(streams) * m)
        out[start:start + len(streams)] = np.cumsum(acc.reshape(len(streams), m), axis=1)

    starts = range(0, n_paths, chunk)
    n_thr = _threads(threads)
    if n_thr == 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(n_thr) as ex:
            list(ex.map(work, starts))
    out += drift[None, :]
    return out


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


@dataclass
class LaplaceEstimate:
    lams: np.ndarray
    estimate: np.ndarray
    se: np.ndarray
    target: np.ndarray             # exp(-int_s^t f)
    target_truncated: np.ndarray   # law actually simulated at this gamma
    n_paths: int

    @property
    def z_scores(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.estimate - self.target_truncated) / self.se
        # deterministic draws: agree up to rounding or fail outright
        exact = np.abs(self.estimate - self.target_truncated) <= 1e-12 * np.maximum(
            1.0, np.abs(self.target_truncated))
        return np.where(self.se > 0, z, np.where(exact, 0.0, np.inf))


def truncated_exponent(family, lam, gamma, s, t, compensate=False):
    """Exponent of ``E exp(-lam (sigma_gamma(t) - sigma_gamma(s)))`` for the simulated law."""
    full = eval_Pi(family, lam, t, s=s)
    if lam == 0 or s == t or not family.has_jumps:
        return full
    lost, _ = integrate.quad(lambda tau: small_jump_exponent(family, lam, gamma, tau), s, t,
                             epsabs=1e-13, epsrel=1e-11, limit=200)
    out = full - lost
    if compensate:
        mean, _ = integrate.quad(lambda tau: float(_small_mean_at(family, gamma, tau)), s, t,
                                 epsabs=1e-14, epsrel=1e-12, limit=200)
        out += lam * mean
    return out


def increment_laplace_mc(family, gamma, s, t, lam_grid, n_paths, rng, compensate=False,
                         threads=None, increments=None):
    """MC estimate of ``E exp(-lam (sigma(t) - sigma(s)))`` with standard errors."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    if n_paths < 1000:
        raise ValueError("n_paths must be at least 1000")
    lams = np.asarray(lam_grid, dtype=float)
    if increments is None:
        if s == t:
            increments = np.zeros(n_paths)
        else:
            increments = sample_increments(family, gamma, [s, t], n_paths, rng,
                                           compensate=compensate, threads=threads)[:, 1]
    vals = np.exp(-lams[None, :] * increments[:, None])
    est = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(len(increments))
    se = np.where(np.ptp(vals, axis=0) == 0, 0.0, se)   # exact zero for deterministic draws
    target = np.array([np.exp(-eval_Pi(family, lam, t, s=s)) for lam in lams])
    target_tr = np.array([np.exp(-truncated_exponent(family, lam, gamma, s, t, compensate))
                          for lam in lams])
    return LaplaceEstimate(lams, est, se, target, target_tr, len(increments))


def piecewise_stable_path(alpha, n_pieces, horizon, rng):
    """Grid and partial sums of independent stable pieces ``alpha_i = alpha(i T / n)``."""
    if n_pieces < 1:
        raise ValueError("n_pieces must be >= 1")
    grid = horizon * np.arange(n_pieces + 1) / n_pieces
    alphas = np.asarray(alpha(grid[1:]), dtype=float)
    if np.any((alphas <= 0) | (alphas >= 1)):
        raise ValueError("stability index out of (0,1)")
    gen = as_stream(rng).generator()
    u = np.pi * gen.random(n_pieces)
    e = gen.standard_exponential(n_pieces)
    x = (horizon / n_pieces) ** (1 / alphas) * (stable.kanter_A(u, alphas) / e) ** ((1 - alphas) / alphas)
    return grid, np.concatenate(([0.0], np.cumsum(x)))


def piecewise_stable_samples(alpha, n_pieces, horizon, n_samples, rng, block=4096):
    """Terminal values ``S_n`` of :func:`piecewise_stable_path`, many at once."""
    grid = horizon * np.arange(1, n_pieces + 1) / n_pieces
    alphas = np.asarray(alpha(grid), dtype=float)
    if np.any((alphas <= 0) | (alphas >= 1)):
        raise ValueError("stability index out of (0,1)")
    gen = as_stream(rng).generator()
    out = np.empty(n_samples)
    for start in range(0, n_samples, block):
        k = min(block, n_samples - start)
        u = np.pi * gen.random((k, n_pieces))
        e = gen.standard_exponential((k, n_pieces))
        x = (horizon / n_pieces) ** (1 / alphas) * (stable.kanter_A(u, alphas) / e) ** (
            (1 - alphas) / alphas)
        out[start:start + k] = x.sum(axis=1)
    return out


def localize_increments(family, t0, r, T, n_paths, rng, gamma0=1e-4, threads=None):
    """Rescaled increments ``(sigma(t0 + r T) - sigma(t0)) / r**(1/alpha(t0))``.

    The truncation level scales with ``r**(1/alpha(t0))`` (``gamma0`` in
    rescaled units) and small jumps are compensated by their mean.
    """
    if family.power_law is None:
        raise ValueError("localization needs a stable-like family (power-law index)")
    family.check_time([t0, t0 + r * T])
    a0 = float(family.power_law(t0))
    scale = r ** (1.0 / a0)
    inc = sample_increments(family, gamma0 * scale, [t0, t0 + r * T], n_paths, rng,
                            compensate=True, threads=threads)[:, 1]
    return inc / scale


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_path_csv(path, dest):
    lines = ["# nhsub v1", "# nhsub-path v1", f"# family={path.family_id}",
             f"# gamma={path.truncation!r}", f"# horizon={path.horizon!r}",
             f"# seed={path.seed}", f"# stream={path.stream}",
             f"# drift_end={float(path.drift_values[-1])!r}", "time,size"]
    lines += [f"{t!r},{x!r}" for t, x in zip(path.jump_times.tolist(), path.jump_sizes.tolist())]
    text = "\n".join(lines) + "\n"
    if dest is None:
        return text
    with open(dest, "w", newline="\n") as fh:
        fh.write(text)
    return text


def read_path_csv(src):
    """Parse a path CSV; the drift is rebuilt as linear up to ``drift_end``."""
    meta, rows = {}, []
    with open(src) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if line == "time,size":
                continue
            t, x = line.split(",")
            rows.append((float(t), float(x)))
    arr = np.array(rows, dtype=float).reshape(-1, 2)
    horizon = float(meta["horizon"])
    seed = meta.get("seed")
    return SubordinatorPath(
        arr[:, 0], arr[:, 1], np.array([0.0, horizon]),
        np.array([0.0, float(meta.get("drift_end", 0.0))]), horizon, float(meta["gamma"]),
        meta.get("family", ""), None if seed in (None, "None") else int(seed))
