"""Time-indexed Bernstein functions and Lévy measures.

A :class:`LevyFamily` bundles, for every time ``t``, a drift rate ``b'(t)``,
a jump density ``nu(s, t)`` and its tail ``nubar(g, t) = nu((g, inf), t)``.
The Laplace exponent of the increment law over ``[s, t]`` is the time
integral of the Bernstein function ``f(lam, tau)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

__all__ = [
    "DIVERGENT",
    "Divergent",
    "HorizonError",
    "LevyFamily",
    "QuadratureError",
    "TimeVaryingIndex",
    "check_a2",
    "check_bernstein",
    "custom",
    "drift_only",
    "eval_Pi",
    "eval_f",
    "eval_tail",
    "gamma_like",
    "is_divergent",
    "mean_jump_rate",
    "multistable",
    "small_jump_exponent",
    "small_jump_mean",
    "tempered_stable",
    "truncated_f",
]

F_TOL = 1e-10
PI_TOL = 1e-8


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""

    def __init__(self, what, achieved, requested):
        super().__init__(
            f"{what}: quadrature error estimate {achieved:.3e} exceeds "
            f"requested tolerance {requested:.3e}")
        self.achieved = achieved
        self.requested = requested


class HorizonError(ValueError):
    """A time argument falls outside the configured horizon."""


class Divergent:
    """Marker for an integral that diverges to +infinity."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "DIVERGENT"

    def __str__(self):
        return "divergent"


DIVERGENT = Divergent()


def is_divergent(value) -> bool:
    return value is DIVERGENT


# ---------------------------------------------------------------------------
# time-varying parameters
# ---------------------------------------------------------------------------

_INDEX_KINDS = ("constant", "affine-clamped", "sinusoidal", "tabulated", "rational")


@dataclass(frozen=True)
class TimeVaryingIndex:
    """A scalar function of time used as a family parameter.

    kinds and their ``params``:

    * ``constant``: ``(c,)``
    * ``affine-clamped``: ``(a, b, lo, hi)`` giving ``clip(a + b t, lo, hi)``
    * ``sinusoidal``: ``(c, amp[, omega[, phase]])`` giving
      ``c + amp sin(omega t + phase)``
    * ``tabulated``: ``(t0, v0, t1, v1, ...)`` linearly interpolated,
      constant outside the table
    * ``rational``: ``(a, b, c, d)`` giving ``(a + b t) / (c + d t)``
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in _INDEX_KINDS:
            raise ValueError(f"unknown index kind {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        need = {"constant": (1, 1), "affine-clamped": (4, 4),
                "sinusoidal": (2, 4), "rational": (4, 4)}
        if self.kind in need:
            lo, hi = need[self.kind]
            if not lo <= len(p) <= hi:
                raise ValueError(f"{self.kind} index takes {lo}..{hi} parameters, got {len(p)}")
        if self.kind == "tabulated":
            if len(p) < 4 or len(p) % 2:
                raise ValueError("tabulated index needs pairs t0 v0 t1 v1 ... (at least two)")
            ts = np.asarray(p[0::2])
            if np.any(np.diff(ts) <= 0):
                raise ValueError("tabulated index times must be strictly increasing")

    @classmethod
    def constant(cls, c):
        return cls("constant", (c,))

    @classmethod
    def sinusoidal(cls, c, amp, omega=1.0, phase=0.0):
        return cls("sinusoidal", (c, amp, omega, phase))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind == "constant":
            out = np.full_like(t, p[0])
        elif self.kind == "affine-clamped":
            out = np.clip(p[0] + p[1] * t, p[2], p[3])
        elif self.kind == "sinusoidal":
            omega = p[2] if len(p) > 2 else 1.0
            phase = p[3] if len(p) > 3 else 0.0
            out = p[0] + p[1] * np.sin(omega * t + phase)
        elif self.kind == "rational":
            out = (p[0] + p[1] * t) / (p[2] + p[3] * t)
        else:
            out = np.interp(t, p[0::2], p[1::2])
        return out if out.ndim else float(out)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        p = self.params
        if self.kind == "constant":
            out = np.zeros_like(t)
        elif self.kind == "affine-clamped":
            raw = p[0] + p[1] * t
            out = np.where((raw > p[2]) & (raw < p[3]), p[1], 0.0)
        elif self.kind == "sinusoidal":
            omega = p[2] if len(p) > 2 else 1.0
            phase = p[3] if len(p) > 3 else 0.0
            out = p[1] * omega * np.cos(omega * t + phase)
        elif self.kind == "rational":
            out = (p[1] * p[2] - p[0] * p[3]) / (p[2] + p[3] * t) ** 2
        else:
            ts, vs = np.asarray(p[0::2]), np.asarray(p[1::2])
            slopes = np.diff(vs) / np.diff(ts)
            k = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(slopes) - 1)
            inside = (t >= ts[0]) & (t <= ts[-1])
            out = np.where(inside, slopes[k], 0.0)
        return out if out.ndim else float(out)

    @property
    def is_constant(self):
        if self.kind == "constant":
            return True
        if self.kind == "sinusoidal":
            return self.params[1] == 0.0
        if self.kind == "affine-clamped":
            return self.params[1] == 0.0 or self.params[2] == self.params[3]
        if self.kind == "rational":
            return self.params[1] * self.params[2] == self.params[0] * self.params[3]
        return bool(np.all(np.asarray(self.params[1::2]) == self.params[1]))

    def probe(self, horizon, n=1024):
        """Probe grid: ``n`` uniform interior points plus both endpoints."""
        inner = (np.arange(n) + 0.5) * horizon / n
        return np.concatenate(([0.0], inner, [horizon]))

    def check_range(self, horizon, lo=0.0, hi=1.0, modulus=0.1, name="index"):
        """Return a list of problems found on the probe grid over ``[0, horizon]``.

        Values must lie strictly inside ``(lo, hi)`` and adjacent probes may not
        differ by more than ``modulus``.
        """
        ts = self.probe(horizon)
        vals = np.asarray(self(ts))
        problems = []
        bad = np.flatnonzero(~((vals > lo) & (vals < hi)))
        if bad.size:
            i = bad[0]
            problems.append(
                f"{name} out of ({lo:g},{hi:g}) at t={ts[i]:.6g} (value {vals[i]:.6g})")
        jumps = np.abs(np.diff(vals))
        if jumps.size and jumps.max() > modulus:
            i = int(np.argmax(jumps))
            problems.append(
                f"{name} continuity modulus {jumps[i]:.3g} > {modulus} near t={ts[i]:.6g}")
        return problems

    def describe(self):
        return f"{self.kind} " + " ".join(f"{v:g}" for v in self.params)


def _as_index(value):
    if isinstance(value, TimeVaryingIndex):
        return value
    return TimeVaryingIndex.constant(float(value))


# ---------------------------------------------------------------------------
# families
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LevyFamily:
    """Drift rate, jump density and tail of one non-homogeneous subordinator.

    Optional closed forms (``bernstein``, ``tail_integral`` ...) are used when
    present; everything else falls back to quadrature on the density.
    """

    name: str
    drift_rate: Callable
    jump_density: Optional[Callable]
    tail: Callable
    activity: str
    bernstein: Optional[Callable] = None
    params: dict = field(default_factory=dict)
    horizon: Optional[float] = None
    # optional closed forms
    tail_integral: Optional[Callable] = None      # int_0^x nubar(u, t) du
    tail_dt: Optional[Callable] = None            # d/dt nubar(g, t)
    tail_dg: Optional[Callable] = None            # d/dg nubar(g, t) = -nu(g, t)
    small_mean: Optional[Callable] = None         # int_0^g x nu(dx, t)
    mean_rate: Optional[Callable] = None          # int_0^inf w nu(dw, t), DIVERGENT allowed
    jump_quantile: Optional[Callable] = None      # (u, g, t) -> x with P(X > x) = u
    power_law: Optional[Callable] = None          # t -> alpha(t) when nu ~ s^{-alpha-1} at 0
    # jumps may be drawn from a dominating family and kept with prob ratio(x, t)
    proposal: Optional["LevyFamily"] = None
    accept_ratio: Optional[Callable] = None
    tail_closed: bool = True

    @property
    def has_closed_bernstein(self):
        return self.bernstein is not None

    @property
    def has_jumps(self):
        return self.jump_density is not None

    def describe(self):
        parts = [self.name] + [f"{k}={v.describe() if hasattr(v, 'describe') else v}"
                               for k, v in self.params.items()]
        return ";".join(parts)

    def check_time(self, t):
        if np.any(np.asarray(t) < 0):
            raise HorizonError(f"{self.name}: negative time {t!r}")
        if self.horizon is not None and np.any(np.asarray(t) > self.horizon * (1 + 1e-12)):
            raise HorizonError(
                f"{self.name}: time {np.max(t):.6g} beyond configured horizon {self.horizon:g}")

    def with_horizon(self, horizon):
        return replace(self, horizon=float(horizon))


def _zero(*args):
    return 0.0 * np.asarray(args[-1], dtype=float) if args else 0.0


def drift_only(rate=1.0):
    """Pure drift: ``f(lam, t) = lam b'(t)``, no jumps."""
    rate = _as_index(rate)

    def tail(g, t):
        return np.zeros(np.broadcast(np.asarray(g), np.asarray(t)).shape) + 0.0

    return LevyFamily(
        name="drift-only",
        drift_rate=rate,
        jump_density=None,
        tail=tail,
        activity="finite",
        bernstein=lambda lam, t: np.asarray(lam) * rate(t),
        params={"drift": rate},
        tail_integral=lambda x, t: 0.0 * np.asarray(x) * np.asarray(t),
        tail_dt=lambda g, t: 0.0 * np.asarray(g) * np.asarray(t),
        tail_dg=lambda g, t: 0.0 * np.asarray(g) * np.asarray(t),
        small_mean=lambda g, t: 0.0 * np.asarray(g) * np.asarray(t),
        mean_rate=lambda t: 0.0,
    )


def multistable(alpha):
    """Multistable subordinator, ``f(lam, t) = lam**alpha(t)``."""
    alpha = _as_index(alpha)

    def density(s, t):
        a = alpha(t)
        s = np.asarray(s, dtype=float)
        return a * s ** (-a - 1) / special.gamma(1 - a)

    def tail(g, t):
        a = alpha(t)
        return np.asarray(g, dtype=float) ** (-a) / special.gamma(1 - a)

    def tail_integral(x, t):
        a = alpha(t)
        return np.asarray(x, dtype=float) ** (1 - a) / special.gamma(2 - a)

    def tail_dt(g, t):
        a = alpha(t)
        da = alpha.derivative(t)
        g = np.asarray(g, dtype=float)
        return tail(g, t) * da * (special.digamma(1 - a) - np.log(g))

    def small_mean(g, t):
        a = alpha(t)
        return a * np.asarray(g, dtype=float) ** (1 - a) / special.gamma(2 - a)

    def quantile(u, g, t):
        return g * np.asarray(u, dtype=float) ** (-1.0 / alpha(t))

    return LevyFamily(
        name="multistable",
        drift_rate=lambda t: 0.0 * np.asarray(t, dtype=float),
        jump_density=density,
        tail=tail,
        activity="infinite",
        bernstein=lambda lam, t: np.asarray(lam, dtype=float) ** alpha(t),
        params={"alpha": alpha},
        tail_integral=tail_integral,
        tail_dt=tail_dt,
        tail_dg=lambda g, t: -density(g, t),
        small_mean=small_mean,
        mean_rate=lambda t: DIVERGENT,
        jump_quantile=quantile,
        power_law=alpha,
    )


def gamma_like(alpha):
    """``nu(ds, t) = s^-1 exp(-alpha(t) s) ds``, ``f = log(1 + lam/alpha(t))``."""
    alpha = _as_index(alpha)

    def density(s, t):
        s = np.asarray(s, dtype=float)
        return np.exp(-alpha(t) * s) / s

    def tail(g, t):
        return special.exp1(alpha(t) * np.asarray(g, dtype=float))

    def tail_integral(x, t):
        a = alpha(t)
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore"):
            first = np.where(x > 0, x * special.exp1(a * np.where(x > 0, x, 1.0)), 0.0)
        return first - np.expm1(-a * x) / a

    def tail_dt(g, t):
        # d/dt E1(a g) = -exp(-a g)/(a g) * g a'
        a = alpha(t)
        g = np.asarray(g, dtype=float)
        return -np.exp(-a * g) / a * alpha.derivative(t)

    return LevyFamily(
        name="gamma-like",
        drift_rate=lambda t: 0.0 * np.asarray(t, dtype=float),
        jump_density=density,
        tail=tail,
        activity="infinite",
        bernstein=lambda lam, t: np.log1p(np.asarray(lam, dtype=float) / alpha(t)),
        params={"alpha": alpha},
        tail_integral=tail_integral,
        tail_dt=tail_dt,
        tail_dg=lambda g, t: -density(g, t),
        small_mean=lambda g, t: -np.expm1(-alpha(t) * np.asarray(g, dtype=float)) / alpha(t),
        mean_rate=lambda t: 1.0 / alpha(t),
    )


def tempered_stable(alpha, theta):
    """Tempered (relativistic) stable: ``f = (lam + theta)^alpha - theta^alpha``."""
    alpha = _as_index(alpha)
    theta = _as_index(theta)

    def density(s, t):
        a, th = alpha(t), theta(t)
        s = np.asarray(s, dtype=float)
        return a * s ** (-a - 1) * np.exp(-th * s) / special.gamma(1 - a)

    def tail(g, t):
        # alpha theta^alpha Gamma(-alpha, theta g) / Gamma(1 - alpha), via the
        # recurrence Gamma(-a, z) = (z^-a e^-z - Gamma(1 - a, z)) / a
        a, th = alpha(t), theta(t)
        g = np.asarray(g, dtype=float)
        return (g ** (-a) * np.exp(-th * g) / special.gamma(1 - a)
                - th ** a * special.gammaincc(1 - a, th * g))

    def small_mean(g, t):
        a, th = alpha(t), theta(t)
        return a * th ** (a - 1) * special.gammainc(1 - a, th * np.asarray(g, dtype=float))

    return LevyFamily(
        name="tempered-stable",
        drift_rate=lambda t: 0.0 * np.asarray(t, dtype=float),
        jump_density=density,
        tail=tail,
        activity="infinite",
        bernstein=lambda lam, t: ((np.asarray(lam, dtype=float) + theta(t)) ** alpha(t)
                                  - theta(t) ** alpha(t)),
        params={"alpha": alpha, "theta": theta},
        tail_dg=lambda g, t: -density(g, t),
        small_mean=small_mean,
        mean_rate=lambda t: alpha(t) * theta(t) ** (alpha(t) - 1),
        power_law=alpha,
        proposal=multistable(alpha),
        accept_ratio=lambda x, t: np.exp(-theta(t) * np.asarray(x, dtype=float)),
    )


def custom(drift_rate, jump_density, tail=None, name="custom", activity="infinite", params=None):
    """Family from an arbitrary density; the tail is integrated when absent."""
    drift_rate = _as_index(drift_rate) if not callable(drift_rate) else drift_rate
    closed = tail is not None
    if tail is None:
        def tail(g, t):
            g_arr = np.asarray(g, dtype=float)
            out = np.array([_tail_quadrature(jump_density, gi, t) for gi in g_arr.ravel()])
            return out.reshape(g_arr.shape) if g_arr.ndim else float(out[0])
    return LevyFamily(
        name=name,
        drift_rate=drift_rate,
        jump_density=jump_density,
        tail=tail,
        activity=activity,
        params=dict(params or {}),
        tail_dg=lambda g, t: -np.asarray(jump_density(g, t), dtype=float),
        tail_closed=closed,
    )


def _tail_quadrature(density, g, t, tol=1e-12):
    """int_g^inf nu(s, t) ds on dyadic shells until a shell drops below tol/10."""
    if g <= 0:
        raise ValueError("tail level must be positive")
    total, lo = 0.0, g
    for _ in range(200):
        hi = 2.0 * lo
        part, _err = integrate.quad(lambda s: float(density(s, t)), lo, hi,
                                    epsabs=tol / 100, epsrel=1e-12, limit=200)
        total += part
        if part < tol / 10 and lo > 1.0:
            break
        lo = hi
    return total


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _check_quad(what, err, tol):
    if not np.isfinite(err) or err > 10 * tol:
        raise QuadratureError(what, err, tol)


def _levy_integral(family, integrand_factor, t, tol, what):
    """int_0^inf factor(s) nu(s, t) ds in the log variable s = e^y."""
    dens = family.jump_density

    def g(y):
        # the integrand vanishes at both ends (A2); guard exp under/overflow
        if y > 700.0 or y < -740.0:
            return 0.0
        s = math.exp(y)
        with np.errstate(over="ignore", invalid="ignore"):
            v = float(integrand_factor(s) * dens(s, t)) * s
        return v if math.isfinite(v) else 0.0

    lo, _e1 = integrate.quad(g, -np.inf, 0.0, epsabs=tol / 4, epsrel=1e-12, limit=400)
    hi, _e2 = integrate.quad(g, 0.0, np.inf, epsabs=tol / 4, epsrel=1e-12, limit=400)
    _check_quad(what, _e1 + _e2, tol)
    return lo + hi


def eval_f(family, lam, t, tol=F_TOL, use_closed=True):
    """Bernstein function ``f(lam, t)``; quadrature when no closed form."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("lambda must be nonnegative")
    family.check_time(t)
    if use_closed and family.bernstein is not None:
        out = family.bernstein(lam, t)
        return float(out) if np.ndim(out) == 0 else out
    if np.ndim(lam):
        return np.array([eval_f(family, float(v), t, tol, use_closed) for v in np.ravel(lam)]
                        ).reshape(np.shape(lam))
    lam = float(lam)
    drift = float(family.drift_rate(t)) * lam
    if lam == 0.0 or not family.has_jumps:
        return drift
    jump = _levy_integral(family, lambda s: -math.expm1(-lam * s), t, tol,
                          f"f({lam:g}, {t:g})")
    return drift + jump


def eval_tail(family, g, t):
    """Tail ``nubar(g, t) = nu((g, inf), t)``."""
    if np.any(np.asarray(g) <= 0):
        raise ValueError("tail level gamma must be positive")
    out = family.tail(g, t)
    return float(out) if np.ndim(out) == 0 else out


def eval_Pi(family, lam, t, tol=PI_TOL, s=0.0):
    """``Pi(lam, t) = int_s^t f(lam, tau) d tau`` by adaptive quadrature."""
    if lam < 0 or tol <= 0:
        raise ValueError("need lam >= 0 and tol > 0")
    family.check_time([s, t])
    if lam == 0.0 or t == s:
        return 0.0
    val, err = integrate.quad(lambda tau: float(eval_f(family, lam, tau)), s, t,
                              epsabs=tol, epsrel=tol, limit=200)
    _check_quad(f"Pi({lam:g}, [{s:g},{t:g}])", err, max(tol, tol * abs(val)))
    return val


def small_jump_mean(family, g, t):
    """``int_0^g x nu(dx, t)``: mean rate of the jumps discarded by truncation."""
    if not family.has_jumps:
        return 0.0
    if family.small_mean is not None:
        return float(family.small_mean(g, t))
    val, _err = integrate.quad(lambda x: x * float(family.jump_density(x, t)), 0.0, g,
                               epsabs=0.0, epsrel=1e-11, limit=400)
    return val


def small_jump_exponent(family, lam, g, t):
    """``int_0^g (1 - exp(-lam x)) nu(dx, t)``, the exponent lost by truncation at ``g``."""
    if not family.has_jumps or lam == 0.0:
        return 0.0
    dens = family.jump_density
    val, _err = integrate.quad(lambda x: -math.expm1(-lam * x) * float(dens(x, t)), 0.0, g,
                               epsabs=0.0, epsrel=1e-11, limit=400)
    return val


def truncated_f(family, lam, g, t):
    """Exponent rate of the compound-Poisson approximation truncated at ``g``."""
    return float(eval_f(family, lam, t)) - small_jump_exponent(family, lam, g, t)


def check_bernstein(family_or_f, t, lam_grid, max_order=3):
    """Finite-difference sign check ``(-1)^(n-1) f^(n) >= -eps_fd``.

    Returns a dict with the list of violations ``(order, lam, estimate, eps_fd)``.
    """
    lam_grid = np.asarray(lam_grid, dtype=float)
    if np.any(lam_grid <= 0) or np.any(np.diff(lam_grid) <= 0):
        raise ValueError("lambda grid must be positive and strictly increasing")
    if not 2 <= max_order <= 5:
        raise ValueError("max_order must be in 2..5")
    if isinstance(family_or_f, LevyFamily):
        def f(lam):
            return np.asarray(eval_f(family_or_f, lam, t), dtype=float)
    else:
        def f(lam):
            return np.asarray(family_or_f(lam), dtype=float)

    eps = np.finfo(float).eps
    rows, violations = [], []
    for n in range(1, max_order + 1):
        coeff = np.array([(-1) ** k * math.comb(n, k) for k in range(n + 1)], dtype=float)
        offs = n / 2.0 - np.arange(n + 1)
        for lam in lam_grid:
            h = lam / (2.0 * max_order)

            def diff(step):
                return float(np.dot(coeff, f(lam + offs * step))) / step ** n

            d1, d2 = diff(h), diff(h / 2)
            scale = float(np.max(np.abs(f(lam + offs * h))))
            eps_fd = abs(d1 - d2) + 2 ** (n + 2) * eps * scale / (h / 2) ** n
            signed = (-1) ** (n - 1) * d2
            rows.append((n, float(lam), d2, eps_fd))
            if signed < -eps_fd:
                violations.append((n, float(lam), d2, eps_fd))
    return {"violations": violations, "estimates": rows, "ok": not violations}


def mean_jump_rate(family, t):
    """``int_0^inf w nu(dw, t)`` or ``DIVERGENT``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if not family.has_jumps:
        return 0.0
    if family.mean_rate is not None:
        out = family.mean_rate(t)
        return out if is_divergent(out) else float(out)
    dens = family.jump_density
    inner, _ = integrate.quad(lambda w: w * float(dens(w, t)), 0.0, 1.0, limit=200)
    total, prev = inner, None
    lo = 1.0
    for _ in range(80):
        part, _ = integrate.quad(lambda w: w * float(dens(w, t)), lo, 2 * lo, limit=200)
        total += part
        if total > 1e12:
            return DIVERGENT
        if prev is not None and part < 1e-14 * max(total, 1.0):
            return total
        if prev is not None and prev > 0 and part / prev > 0.99 and lo > 2 ** 40:
            return DIVERGENT
        prev = part
        lo *= 2
    return DIVERGENT


def check_a2(family, t_probe):
    """Return problems with ``int (s ^ 1) nu(ds, t) < inf`` at the probe times."""
    problems = []
    if not family.has_jumps:
        return problems
    for t in np.atleast_1d(t_probe):
        try:
            near = small_jump_mean(family, 1.0, float(t))
            far = float(eval_tail(family, 1.0, float(t)))
        except Exception as exc:  # quadrature blow-up counts as failure
            problems.append(f"A2 integral failed at t={t:.6g}: {exc}")
            continue
        if not (np.isfinite(near) and np.isfinite(far)):
            problems.append(f"A2 integral infinite at t={t:.6g}")
    return problems
