"""Variable-order Riemann-Liouville / Caputo operators and the forward equation.

The jump part of the generator acts on a density ``q`` as
``d/dx int_0^x q(s) nubar(x - s, t) ds``.  On a uniform grid with the
cell-averaged kernel ``K_j = (1/dx) int_{j dx}^{(j+1) dx} nubar(u, t) du`` the
backward difference of the discrete convolution is

    D_i = K_0 q_i + sum_{j>=1} (K_j - K_{j-1}) q_{i-j},

which is the generator of a lattice jump process moving ``j`` cells at rate
``K_{j-1} - K_j >= 0``.  The explicit scheme therefore preserves positivity
and mass (up to outflow at ``x_max``) whenever ``dt (K_0 + b'/dx) <= 1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import fft, integrate, special

from . import stable
from .bernstein import LevyFamily, small_jump_mean
from .paths import sample_increments

__all__ = [
    "CFLError",
    "DensityField",
    "KernelTable",
    "MassLossError",
    "SpaceTimeGrid",
    "build_kernel",
    "caputo_apply",
    "initial_density",
    "read_density_binary",
    "rl_apply",
    "rl_caputo_residual",
    "solve_forward",
    "write_density_binary",
    "write_density_csv",
]

EPS_NEG = 1e-8
C_STAB = 0.5
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


class CFLError(ValueError):
    """Time step too large for a positivity-preserving explicit step."""


class MassLossError(RuntimeError):
    """More mass escaped through ``x_max`` than the declared bound."""


@dataclass(frozen=True)
class SpaceTimeGrid:
    x_max: float
    n_x: int
    t_max: float
    n_t: int

    def __post_init__(self):
        if self.n_x < 8 or self.n_t < 8:
            raise ValueError("n_x and n_t must be at least 8")
        if not (self.x_max > 0 and self.t_max > 0):
            raise ValueError("x_max and t_max must be positive")

    @property
    def dx(self):
        return self.x_max / self.n_x

    @property
    def dt(self):
        return self.t_max / self.n_t

    @property
    def x(self):
        """Nodes ``i dx`` for ``i = 0 .. n_x``."""
        return self.dx * np.arange(self.n_x + 1)

    @property
    def n_nodes(self):
        return self.n_x + 1

    def time_index(self, t):
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t:g} is not on the time grid (dt={self.dt:g})")
        return k


@dataclass
class DensityField:
    """Density values at selected times: ``values[i, k]`` at ``(x[i], times[k])``."""

    grid: SpaceTimeGrid
    times: np.ndarray
    values: np.ndarray
    kind: str = "subordinator_density"
    escaped: Optional[np.ndarray] = None   # mass through x_max by each saved time
    min_value: float = 0.0
    raw: Optional[np.ndarray] = None
    x: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.kind not in ("subordinator_density", "inverse_density"):
            raise ValueError(f"unknown density kind {self.kind!r}")
        if self.x is None:
            self.x = self.grid.x

    def at(self, t):
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise KeyError(f"time {t:g} was not saved")
        return self.values[:, k]

    def mass(self, t):
        return float(self.at(t).sum() * self.grid.dx)

    def cdf(self, t):
        """CDF at the cell edges ``x_i + dx/2``."""
        return np.cumsum(self.at(t)) * self.grid.dx


# ---------------------------------------------------------------------------
# kernel
# ---------------------------------------------------------------------------


def _time_invariant(family):
    for v in family.params.values():
        if hasattr(v, "is_constant"):
            if not v.is_constant:
                return False
        elif callable(v):
            return False
    return not callable(family.drift_rate) or getattr(family.drift_rate, "is_constant", False)


class KernelTable:
    """Cell-averaged tail ``K[i, k]``, rows built lazily per time level.

    Cells with a closed-form antiderivative of the tail are integrated
    exactly; otherwise cell 0 uses ``int_0^dx nubar = dx nubar(dx) + int_0^dx x nu``
    and the other cells 8-point Gauss-Legendre.
    """

    def __init__(self, family: LevyFamily, grid: SpaceTimeGrid):
        self.family = family
        self.grid = grid
        self.n = grid.n_nodes
        self.time_invariant = _time_invariant(family)
        self._cache = {}

    def row_at(self, t):
        key = 0.0 if self.time_invariant else float(t)
        row = self._cache.get(key)
        if row is None:
            row = self._compute(t)
            if self.time_invariant or len(self._cache) < 4:
                self._cache[key] = row
        return row

    def __getitem__(self, idx):
        i, k = idx
        return self.row_at(k * self.grid.dt)[i]

    def row(self, k):
        return self.row_at(k * self.grid.dt)

    def _compute(self, t):
        fam, dx, n = self.family, self.grid.dx, self.n
        if not fam.has_jumps:
            return np.zeros(n)
        edges = dx * np.arange(n + 1)
        if fam.tail_integral is not None:
            ti = np.asarray(fam.tail_integral(edges, t), dtype=float)
            row = np.diff(ti) / dx
        else:
            row = np.empty(n)
            mid = edges[1:-1, None] + 0.5 * dx * (1 + _GL_X[None, :])
            vals = np.asarray(fam.tail(mid.ravel(), t), dtype=float).reshape(mid.shape)
            row[1:] = 0.5 * vals @ _GL_W
            first = dx * float(fam.tail(dx, t)) + small_jump_mean(fam, dx, t)
            row[0] = first / dx
        if not np.all(np.isfinite(row)) or row[0] < 0:
            raise ValueError("non-integrable tail singularity at the origin")
        # round-off can break monotonicity by a few ulps in the far field
        return np.maximum(np.minimum.accumulate(row), 0.0)


def build_kernel(family, grid):
    return KernelTable(family, grid)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _conv(kernel_row, q):
    n = len(q)
    size = fft.next_fast_len(2 * n - 1, real=True)
    out = fft.irfft(fft.rfft(kernel_row, size) * fft.rfft(q, size), size)[:n]
    return out


def _row(kernel, k):
    return kernel if isinstance(kernel, np.ndarray) else kernel.row(k)


def _dx(kernel, dx):
    if dx is not None:
        return dx
    return kernel.grid.dx


def rl_apply(q_slice, kernel, k=0, dx=None):
    """Discrete ``d/dx int_0^x q(s) nubar(x - s, t_k) ds``."""
    q = np.asarray(q_slice, dtype=float)
    K = _row(kernel, k)
    if len(q) != len(K):
        raise ValueError(f"length mismatch: q has {len(q)} nodes, kernel {len(K)}")
    h = _dx(kernel, dx)
    c = h * _conv(K, q)
    return np.diff(c, prepend=0.0) / h


def caputo_apply(q_slice, dq_slice, kernel, k=0, dx=None):
    """Discrete ``int_0^x q'(s) nubar(x - s, t_k) ds``.

    ``dq_slice[m]`` is the backward difference ``(q[m] - q[m-1]) / dx``;
    entry 0 is ignored.
    """
    dq = np.asarray(dq_slice, dtype=float)
    K = _row(kernel, k)
    if len(dq) != len(K) or len(q_slice) != len(K):
        raise ValueError("length mismatch between slices and kernel")
    h = _dx(kernel, dx)
    d = dq.copy()
    d[0] = 0.0
    # sum_{m=1}^{i} K_{i-m} dq_m dx
    return h * _conv(K, d)


def backward_difference(q, dx):
    q = np.asarray(q, dtype=float)
    return np.diff(q, prepend=q[0]) / dx


def rl_caputo_residual(q_slice, kernel, k=0, x_interior=None):
    """``max |RL q - q(0) nubar(x_i) - Caputo q|`` over interior nodes.

    Interior nodes are ``x_i >= x_interior`` (default ``x_max / 10``), away
    from the tail singularity at the origin.
    """
    grid = kernel.grid
    q = np.asarray(q_slice, dtype=float)
    x = grid.x
    if x_interior is None:
        x_interior = 0.1 * grid.x_max
    t = k * grid.dt
    rl = rl_apply(q, kernel, k)
    cap = caputo_apply(q, backward_difference(q, grid.dx), kernel, k)
    inner = x >= x_interior
    tail = np.asarray(kernel.family.tail(x[inner], t), dtype=float) if kernel.family.has_jumps \
        else np.zeros(inner.sum())
    return float(np.max(np.abs(rl[inner] - q[0] * tail - cap[inner])))


# ---------------------------------------------------------------------------
# forward equation
# ---------------------------------------------------------------------------


def initial_density(family, grid, t_start, rng=0, n_paths=100_000, gamma=1e-6):
    """Density of ``sigma(t_start)`` on the grid nodes (cell averages).

    Multistable and gamma-like families use the closed-form law with the
    index frozen at ``t = 0``; drift-only is a point mass in one cell; other
    families use a Monte Carlo histogram.
    """
    x = grid.x
    dx = grid.dx
    edges = np.concatenate(([0.0], x[:-1] + 0.5 * dx, [x[-1] + 0.5 * dx]))
    name = family.name
    if name == "multistable":
        a0 = float(family.params["alpha"](0.0))
        cdf = stable.cdf(edges, a0, scale=t_start)
    elif name == "gamma-like":
        a0 = float(family.params["alpha"](0.0))
        cdf = special.gammainc(t_start, a0 * edges)
    elif not family.has_jumps:
        pos, _ = integrate.quad(lambda s: float(family.drift_rate(s)), 0.0, t_start)
        q = np.zeros(grid.n_nodes)
        i = int(round(pos / dx))
        if i < grid.n_nodes:
            q[i] = 1.0 / dx
        return q
    else:
        vals = sample_increments(family, gamma, [0.0, t_start], n_paths, rng,
                                 compensate=True)[:, 1]
        counts, _ = np.histogram(vals, bins=edges)
        return counts / (n_paths * dx)
    return np.diff(cdf) / dx


def excess_variance(family, dx, t, n_cells):
    """Second-moment excess of the lattice jump law over the true one.

    The lattice moves a jump of size ``y`` to the two neighbouring nodes
    with linear weights, which keeps the mean and inflates the variance
    rate by ``sum_j 2 int_{cell j} (c_j - u) nubar(u, t) du``.
    """
    if not family.has_jumps:
        return 0.0
    j = np.arange(1, n_cells)
    u = (j[:, None] + 0.5 * (1 + _GL_X)[None, :]) * dx
    vals = np.asarray(family.tail(u.ravel(), t), dtype=float).reshape(u.shape)
    cen = (j + 0.5) * dx
    rest = float(np.sum((2 * (cen[:, None] - u) * vals) @ _GL_W) * 0.5 * dx)
    tail_dx = float(family.tail(dx, t))
    first = dx * (dx * tail_dx + small_jump_mean(family, dx, t))
    m2, _ = integrate.quad(lambda y: y * y * float(family.jump_density(y, t)), 0.0, dx,
                           epsabs=0.0, epsrel=1e-11, limit=200)
    return first - (dx * dx * tail_dx + m2) + rest


def correct_moment(q, dx, w):
    """Undo a Gaussian smoothing of variance ``w`` to leading order, in log form."""
    if w == 0.0:
        return q.copy()
    lap = np.zeros_like(q)
    lap[1:-1] = (q[2:] - 2 * q[1:-1] + q[:-2]) / dx ** 2
    pos = q > 0
    out = np.where(pos, q, 0.0)
    # the expansion is only meaningful where the correction is small; cap
    # amplification where q is a vanishing far-left tail
    expo = np.minimum(-0.5 * w * lap[pos] / q[pos], 1.0)
    out[pos] = q[pos] * np.exp(expo)
    return out


def stable_step(family, grid, kernel=None):
    """Largest ``dt`` with ``dt (K_0 + b'/dx) <= C_STAB`` over the time grid."""
    kernel = kernel or build_kernel(family, grid)
    ts = np.linspace(0.0, grid.t_max, 65)
    k0 = max(float(kernel.row_at(t)[0]) for t in (ts[:1] if kernel.time_invariant else ts))
    bmax = float(np.max(np.asarray(family.drift_rate(ts), dtype=float) + 0 * ts))
    rate = k0 + bmax / grid.dx
    return np.inf if rate == 0 else C_STAB / rate


def solve_forward(family, grid, init, t_start, save_times=None, max_outflow=0.01,
                  c_stab=C_STAB, moment_correction=True):
    """Explicit Euler / upwind march of ``q_t = -b' q_x - D^R q`` from ``t_start``.

    Only the slices at ``save_times`` (default ``t_max``) are stored.  The
    run aborts if escaped mass through ``x_max`` exceeds ``max_outflow``.

    With ``moment_correction`` each saved slice is corrected for the
    accumulated lattice excess variance (see :func:`excess_variance`); the
    uncorrected slices are kept in ``DensityField.raw``.
    """
    q = np.asarray(init, dtype=float).copy()
    if q.shape != (grid.n_nodes,):
        raise ValueError(f"init must have {grid.n_nodes} values")
    if np.any(q < -EPS_NEG):
        raise ValueError("init has negative values")
    kernel = build_kernel(family, grid)
    dt, dx = grid.dt, grid.dx
    k0 = grid.time_index(t_start)
    k_end = grid.n_t
    ts = dt * np.arange(k0, k_end + 1)
    if save_times is None:
        save_times = [grid.t_max]
    save_k = sorted({grid.time_index(t) for t in save_times})
    if save_k and (save_k[0] < k0 or save_k[-1] > k_end):
        raise ValueError("save times outside [t_start, t_max]")

    drift = np.broadcast_to(np.asarray(family.drift_rate(ts), dtype=float), ts.shape)
    bound = max(float(kernel.row_at(t)[0]) for t in (ts[:1] if kernel.time_invariant
                                                      else ts[::max(1, len(ts) // 64)]))
    rate = bound + float(drift.max()) / dx
    if dt * rate > c_stab * (1 + 1e-12):
        raise CFLError(f"dt={dt:.3g} exceeds the stability bound {c_stab / rate:.3g} "
                       f"(K0={bound:.4g}, b'max={drift.max():.4g}, dx={dx:.3g})")

    n = grid.n_nodes
    size = fft.next_fast_len(2 * n - 1, real=True)
    kfft_const = fft.rfft(kernel.row_at(ts[0]), size) if kernel.time_invariant else None
    escaped = 0.0
    saved, esc_saved = [], []
    qmin = float(q.min())
    for step, k in enumerate(range(k0, k_end + 1)):
        if k in save_k:
            saved.append(q.copy())
            esc_saved.append(escaped)
        if k == k_end:
            break
        t = ts[step]
        kf = kfft_const if kfft_const is not None else fft.rfft(kernel.row_at(t), size)
        c = dx * fft.irfft(kf * fft.rfft(q, size), size)[:n]
        jump = np.diff(c, prepend=0.0) / dx
        b = drift[step]
        adv = b * np.diff(q, prepend=0.0) / dx if b else 0.0
        escaped += dt * (c[-1] + b * q[-1])
        q = q - dt * (jump + adv)
        qmin = min(qmin, float(q.min()))
        if escaped > max_outflow:
            raise MassLossError(f"escaped mass {escaped:.4g} exceeds bound {max_outflow:g} "
                                f"at t={t + dt:.6g}")
    if qmin < -EPS_NEG:
        raise RuntimeError(f"negative undershoot {qmin:.3g} below -{EPS_NEG:g}")
    raw = np.stack(saved, axis=1)
    times = dt * np.array(save_k, dtype=float)
    values = raw
    if moment_correction and family.has_jumps:
        w = accumulated_excess(family, grid, t_start, times, kernel.time_invariant)
        values = np.stack([correct_moment(raw[:, i], dx, w[i]) for i in range(len(times))],
                          axis=1)
    return DensityField(grid, times, values, escaped=np.array(esc_saved), min_value=qmin,
                        raw=raw)


def accumulated_excess(family, grid, t_start, times, time_invariant=False, n_nodes=129):
    """``int_{t_start}^{t} V(s) ds`` at each of ``times``."""
    times = np.asarray(times, dtype=float)
    if time_invariant:
        return excess_variance(family, grid.dx, t_start, grid.n_nodes) * (times - t_start)
    ts = np.linspace(t_start, grid.t_max, n_nodes)
    v = np.array([excess_variance(family, grid.dx, t, grid.n_nodes) for t in ts])
    cum = integrate.cumulative_trapezoid(v, ts, initial=0.0)
    return np.interp(times, ts, cum)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_density_csv(field_, dest, meta=None):
    lines = ["# nhsub v1", f"# kind={field_.kind}", f"# x_max={field_.grid.x_max!r}",
             f"# n_x={field_.grid.n_x}", f"# t_max={field_.grid.t_max!r}",
             f"# n_t={field_.grid.n_t}"]
    lines += [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append("x,t,q")
    vals = np.where(field_.values < 0, 0.0, field_.values)
    for k, t in enumerate(field_.times.tolist()):
        for xi, qi in zip(field_.x.tolist(), vals[:, k].tolist()):
            lines.append(f"{xi!r},{t!r},{qi!r}")
    text = "\n".join(lines) + "\n"
    with open(dest, "w", newline="\n") as fh:
        fh.write(text)


def write_density_binary(field_, dest):
    """Little-endian dump: ``x_max, n_x, t_max, n_t``, saved times, then values row-major."""
    g = field_.grid
    with open(dest, "wb") as fh:
        fh.write(struct.pack("<dqdq", g.x_max, g.n_x, g.t_max, g.n_t))
        fh.write(struct.pack("<q", len(field_.times)))
        fh.write(np.asarray(field_.times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field_.values, dtype="<f8").tobytes())


def read_density_binary(src, kind="subordinator_density"):
    with open(src, "rb") as fh:
        x_max, n_x, t_max, n_t = struct.unpack("<dqdq", fh.read(32))
        (m,) = struct.unpack("<q", fh.read(8))
        times = np.frombuffer(fh.read(8 * m), dtype="<f8").astype(float)
        vals = np.frombuffer(fh.read(), dtype="<f8").astype(float).reshape(n_x + 1, m)
    return DensityField(SpaceTimeGrid(x_max, n_x, t_max, n_t), times, vals, kind)
