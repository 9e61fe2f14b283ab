"""Inverse subordinator: first passage, density formula and governing equation.

``L(t) = inf{x >= 0 : sigma(x) > t}``.  Its density is the convolution
``l(x, t) = int_0^t q(s; x) nubar(t - s, x) ds`` where ``q(s; x)`` is the
density at ``s`` of ``sigma(x)`` (the subordinator's time parameter ``x``
appears as the second argument).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import fracpde, stable
from .bernstein import QuadratureError
from .paths import HorizonExhausted, _draw_window, _drift_table
from .rng import as_stream

__all__ = [
    "InverseSamples",
    "ResidualReport",
    "first_passage",
    "inverse_density_formula",
    "inverse_density_grid",
    "inverse_density_mc",
    "inverse_equation_residual",
    "sample_inverse",
    "timechanged_density",
]


@dataclass
class InverseSamples:
    t_eval: np.ndarray
    samples: np.ndarray          # (n_paths, len(t_eval))
    exhausted: int = 0


def _passage(times, sizes, drift_t, drift_v, horizon, level):
    """First passage above ``level`` of drift + jumps; ``None`` past the horizon."""
    prefix = np.cumsum(sizes)
    after = np.interp(times, drift_t, drift_v) + prefix
    k = int(np.searchsorted(after, level, side="right"))
    before = prefix[k - 1] if k > 0 else 0.0
    # drift may cross before the next jump
    target = level - before
    if target < drift_v[0]:
        s_star = float(drift_t[0])
    else:
        j = int(np.searchsorted(drift_v, target, side="right"))
        if j >= len(drift_v):
            s_star = np.inf
        else:
            b0, b1 = drift_v[j - 1], drift_v[j]
            s_star = float(drift_t[j - 1] + (target - b0) * (drift_t[j] - drift_t[j - 1]) / (b1 - b0))
    if k < len(times):
        return min(s_star, float(times[k]))
    return s_star if s_star <= horizon else None


def first_passage(path, t):
    """``inf {s : sigma(s) > t}`` on a stored path (exact for step + linear drift)."""
    if t < 0:
        raise ValueError("level must be nonnegative")
    out = _passage(path.jump_times, path.jump_sizes, path.drift_times, path.drift_values,
                   path.horizon, t)
    if out is None:
        raise HorizonExhausted(f"level {t:g} not reached before horizon {path.horizon:g}")
    return out


def sample_inverse(family, gamma, t_eval, n_paths, rng, compensate=True, horizon=1.0,
                   max_doublings=30, max_exhausted=1e-3, chunk=256):
    """``L(t)`` for each ``t`` in ``t_eval`` on ``n_paths`` independent paths.

    Each path is extended window by window (horizon doubling, one substream
    per window) until ``sigma(horizon) > 1.5 max(t_eval)``.
    """
    t_eval = np.atleast_1d(np.asarray(t_eval, dtype=float))
    target = 1.5 * float(t_eval.max())
    root = as_stream(rng)
    out = np.empty((n_paths, len(t_eval)))
    exhausted = 0
    for start in range(0, n_paths, chunk):
        ids = list(range(start, min(start + chunk, n_paths)))
        jt = {i: [] for i in ids}
        js = {i: [] for i in ids}
        dts, dvs = [np.array([0.0])], [np.array([0.0])]
        pending = ids
        lo, hi = 0.0, float(horizon)
        level = {i: 0.0 for i in ids}
        for w in range(max_doublings + 1):
            streams = [root.child(i).at_window(w) for i in pending]
            _, pid, t_j, x_j = _draw_window(family, gamma, lo, hi, streams)
            dt_, dv_ = _drift_table(family, gamma, lo, hi, compensate)
            dts.append(dt_[1:])
            dvs.append(dvs[-1][-1] + dv_[1:])
            order = np.lexsort((t_j, pid))
            pid, t_j, x_j = pid[order], t_j[order], x_j[order]
            bounds = np.searchsorted(pid, np.arange(len(pending) + 1))
            for n, i in enumerate(pending):
                a, b = bounds[n], bounds[n + 1]
                jt[i].append(t_j[a:b])
                js[i].append(x_j[a:b])
                level[i] += float(x_j[a:b].sum())
            drift_end = float(dvs[-1][-1])
            pending = [i for i in pending if level[i] + drift_end <= target]
            if not pending:
                break
            lo, hi = hi, 2 * hi
        drift_t = np.concatenate(dts)
        drift_v = np.concatenate(dvs)
        for i in ids:
            times = np.concatenate(jt[i])
            sizes = np.concatenate(js[i])
            for m, t in enumerate(t_eval):
                v = _passage(times, sizes, drift_t, drift_v, hi, t)
                if v is None:
                    exhausted += 1
                    v = np.nan
                out[i, m] = v
    if exhausted > max_exhausted * n_paths * len(t_eval):
        raise HorizonExhausted(f"{exhausted} of {n_paths * len(t_eval)} passages beyond horizon")
    return InverseSamples(t_eval, out, exhausted)


def inverse_density_mc(family, gamma, t, n_paths, bandwidth, rng, **kw):
    """Histogram of ``L(t)`` with bin width ``bandwidth``; returns (edges, density, samples)."""
    if n_paths < 10_000:
        raise ValueError("n_paths must be at least 1e4")
    res = sample_inverse(family, gamma, [t], n_paths, rng, **kw)
    s = res.samples[:, 0]
    s = s[np.isfinite(s)]
    top = bandwidth * (np.floor(s.max() / bandwidth) + 1)
    edges = np.arange(0.0, top + 0.5 * bandwidth, bandwidth)
    counts, _ = np.histogram(s, bins=edges)
    return edges, counts / (len(s) * bandwidth), s


# ---------------------------------------------------------------------------
# density formula
# ---------------------------------------------------------------------------


def inverse_density_formula(q_field, family, x, t, tol=1e-9):
    """``l(x, t) = int_0^t q(s, x) nubar(t - s, x) ds`` by adaptive quadrature.

    The tail singularity at ``s = t`` is removed by ``s = t - v**p`` with
    ``p = 1 / (1 - alpha(x))`` for power-law families (``p = 2`` otherwise).
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if x == 0:
        return float(family.tail(t, 0.0))
    p = 1.0 / (1.0 - float(family.power_law(x))) if family.power_law is not None else 2.0
    top = t ** (1.0 / p)

    def h(v):
        u = v ** p
        if u <= 0:
            return 0.0
        return float(q_field(t - u, x)) * float(family.tail(u, x)) * p * v ** (p - 1)

    val, err = integrate.quad(h, 0.0, top, epsabs=tol, epsrel=tol, limit=400)
    if err > 100 * max(tol, tol * abs(val)):
        raise QuadratureError(f"l({x:g}, {t:g})", err, tol)
    return val


def _tail_cells(family, x, t, s_nodes):
    """Product-integration weights for ``int_0^t q(s) nubar(t - s, x) ds``.

    Node ``i`` carries the mass ``q_i ds`` of its cell; node 0 sits at the
    origin, so its mass lives in ``[0, ds/2]`` and its weight is the average
    tail over that half cell times ``ds``.
    """
    ds = s_nodes[1] - s_nodes[0]
    a = np.clip(s_nodes - 0.5 * ds, 0.0, t)
    b = np.clip(s_nodes + 0.5 * ds, 0.0, t)
    if family.tail_integral is not None:
        ti = family.tail_integral
        out = np.asarray(ti(t - a, x) - ti(t - b, x), dtype=float)
    else:
        out = np.empty(len(s_nodes))
        for n, (lo, hi) in enumerate(zip(a, b)):
            out[n] = integrate.quad(lambda s: float(family.tail(t - s, x)), lo, hi,
                                    limit=100)[0] if hi > lo else 0.0
    if b[0] > a[0]:
        out[0] *= ds / (b[0] - a[0])
    return out


def _convolve_tail(family, x, s_nodes, q):
    """``l(x, t_k) = int_0^{t_k} q(s) nubar(t_k - s, x) ds`` by product integration."""
    ds = s_nodes[1] - s_nodes[0]
    n = len(s_nodes)
    ti = family.tail_integral
    if ti is None:
        raise ValueError("family needs a closed-form tail integral")
    lag = np.arange(n)
    # cell [s_j - ds/2, s_j + ds/2] at lag m = k - j, clipped to s <= t_k
    band = (np.asarray(ti((lag + 0.5) * ds, x), dtype=float)
            - np.asarray(ti(np.maximum(lag - 0.5, 0.0) * ds, x), dtype=float))
    # node 0 holds the mass of [0, ds/2]: average tail there times ds
    w0 = 2.0 * (np.asarray(ti(s_nodes, x), dtype=float)
                - np.asarray(ti(np.maximum(s_nodes - 0.5 * ds, 0.0), x), dtype=float))
    out = q[0] * w0
    out[1:] += np.convolve(band, q[1:])[:n - 1]
    out[0] = 0.0
    return out


def inverse_density_field(family, t_max, n_t, x_max, n_x, t_start=0.05, max_outflow=1.0):
    """``l(x_i, t_k)`` on a full grid from one forward-equation run.

    The forward solver marches ``sigma`` in its time parameter up to
    ``x_max`` on the space interval ``[0, t_max]``; the operator is causal in
    space, so mass beyond ``t_max`` is irrelevant.  Below ``t_start`` the law
    of ``sigma(x)`` is the stable law with index frozen at zero.
    """
    if family.power_law is None:
        raise ValueError("forward-equation route needs a stable-like family")
    ds = t_max / n_t
    a_max = float(np.max(family.power_law(np.linspace(0.0, x_max, 513))))
    k0 = ds ** (-a_max) / special.gamma(2 - a_max)
    save_every = max(1, int(np.ceil(x_max * k0 / (0.8 * fracpde.C_STAB) / n_x)))
    pde_grid = fracpde.SpaceTimeGrid(t_max, n_t, x_max, save_every * n_x)
    t_start = pde_grid.dt * max(1, round(t_start / pde_grid.dt))
    out_grid = fracpde.SpaceTimeGrid(x_max, n_x, t_max, n_t)
    xs = out_grid.x
    later = xs[xs >= t_start]
    init = fracpde.initial_density(family, pde_grid, t_start)
    field = fracpde.solve_forward(family, pde_grid, init, t_start, save_times=later,
                                  max_outflow=max_outflow)
    s_nodes = pde_grid.x
    edges = np.concatenate(([0.0], s_nodes[:-1] + 0.5 * ds, [t_max + 0.5 * ds]))
    a0 = float(family.power_law(0.0))
    values = np.zeros((n_x + 1, n_t + 1))
    values[0, 1:] = np.asarray(family.tail(s_nodes[1:], 0.0), dtype=float)
    for i, xi in enumerate(xs):
        if i == 0:
            continue
        if xi < t_start:
            q = np.diff(stable.cdf(edges, a0, scale=xi)) / ds
        else:
            q = field.at(xi)
        values[i] = _convolve_tail(family, xi, s_nodes, q)
    return fracpde.DensityField(out_grid, s_nodes, values, kind="inverse_density")


def inverse_density_grid(family, t, x_max, n_x=600, n_s=1000, t_start=0.05, max_outflow=1.0):
    """``l(x, t)`` at one ``t`` on ``x_k = k x_max / n_x``; see :func:`inverse_density_field`."""
    fld = inverse_density_field(family, t, n_s, x_max, n_x, t_start, max_outflow)
    return fld.x, fld.values[:, -1]


# ---------------------------------------------------------------------------
# governing equation
# ---------------------------------------------------------------------------


@dataclass
class ResidualReport:
    residual: float          # max |R| over probes
    scale: float             # first-order reference scale
    b_max: float             # max |B l| over probes
    terms: np.ndarray        # rows (dl/dx, D^R l, B l, R) per probe


def _cell_integrals(fn, x, dt, n):
    """``int_{j dt}^{(j+1) dt} fn(u, x) du`` for ``j < n``; cell 0 by adaptive quadrature."""
    gx, gw = np.polynomial.legendre.leggauss(8)
    out = np.empty(n)
    c0, _ = integrate.quad(lambda u: float(fn(u, x)), 0.0, dt, limit=200)
    out[0] = c0
    if n > 1:
        j = np.arange(1, n)
        u = (j[:, None] + 0.5 * (1 + gx)[None, :]) * dt
        out[1:] = 0.5 * dt * (np.asarray(fn(u.ravel(), x), dtype=float).reshape(u.shape) @ gw)
    return out


def inverse_equation_residual(l_field, family, probes):
    """Residual of ``dl/dx + D^R_t(x) l + B_{t,x} l = 0`` at interior probes.

    ``l_field.values[i, k]`` holds ``l(x_i, t_k)`` on the full grid.  The
    reference scale is ``h * max|terms| / ell`` with ``h = max(dx, dt)`` and
    ``ell`` the smallest probe coordinate.
    """
    if family.tail_dt is None:
        raise ValueError("family needs the analytic derivative of the tail in its time parameter")
    g = l_field.grid
    dx, dt = g.dx, g.dt
    L = l_field.values
    if L.shape != (g.n_x + 1, g.n_t + 1):
        raise ValueError("l_field must hold every grid time")
    xs, ts = g.x, dt * np.arange(g.n_t + 1)
    G = integrate.cumulative_trapezoid(L, dx=dx, axis=0, initial=0.0)
    G[1:, 0] = 1.0    # L(0) = 0: all mass at the origin
    rows = []
    for xp, tp in probes:
        i, k = int(round(xp / dx)), int(round(tp / dt))
        if not (1 <= i <= g.n_x - 1 and 2 <= k <= g.n_t - 1):
            raise ValueError(f"probe ({xp:g}, {tp:g}) too close to the grid boundary")
        x = xs[i]
        dl = (L[i + 1, k] - L[i - 1, k]) / (2 * dx)
        # D^R: kernel nubar(., x) in the time variable
        edges = dt * np.arange(k + 2)
        if family.tail_integral is not None:
            kern = np.diff(np.asarray(family.tail_integral(edges, x), dtype=float)) / dt
        else:
            kern = _cell_integrals(family.tail, x, dt, k + 1) / dt
        dr = fracpde.rl_apply(L[i, :k + 1], kern, dx=dt)[k]
        # B: int_0^t d/dx nubar(t - s, x) d/ds G(x, s) ds
        dG = np.gradient(G[i, :k + 2], dt)[:k + 1]
        w = _cell_integrals(family.tail_dt, x, dt, k)
        mids = 0.5 * (dG[k - np.arange(k)] + dG[k - np.arange(k) - 1])
        b = float(np.dot(w, mids))
        rows.append((dl, dr, b, dl + dr + b))
    terms = np.array(rows)
    ell = min(min(p) for p in probes)
    scale = max(dx, dt) * float(np.abs(terms[:, :3]).max()) / ell
    return ResidualReport(float(np.abs(terms[:, 3]).max()), scale,
                          float(np.abs(terms[:, 2]).max()), terms)


# ---------------------------------------------------------------------------
# time-changed Markov densities
# ---------------------------------------------------------------------------


def timechanged_density(markov_kernel, l_slice, x, y, t, tol=1e-9, u_max=None):
    """``g(x, y, t) = int_0^inf p(x, y, u) l(u, t) du``."""
    if u_max is None:
        u_max = 1.0
        for _ in range(60):
            if float(l_slice(u_max)) < 1e-16:
                break
            u_max *= 2.0
    val, err = integrate.quad(lambda u: float(markov_kernel(x, y, u)) * float(l_slice(u)),
                              0.0, u_max, epsabs=tol, epsrel=tol, limit=400)
    if err > 100 * max(tol, tol * abs(val)):
        raise QuadratureError(f"g({x:g}, {y:g}, {t:g})", err, tol)
    return val
