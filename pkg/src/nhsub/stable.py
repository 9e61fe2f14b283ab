"""One-sided stable laws with Laplace transform ``exp(-c lam**alpha)``.

Sampling uses Kanter's representation; the distribution function uses the
same representation integrated over the uniform angle, which gives a smooth
integrand suitable for fixed Gauss-Legendre quadrature.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "kanter_A",
    "sample",
    "cdf",
    "pdf",
    "levy_pdf",
    "levy_cdf",
    "inverse_cdf",
]

_NODES = 512


def kanter_A(phi, alpha):
    """Kanter's function ``A(phi)`` on ``(0, pi)``."""
    phi = np.asarray(phi, dtype=float)
    a = alpha
    return (np.sin(a * phi) ** (a / (1 - a)) * np.sin((1 - a) * phi)
            / np.sin(phi) ** (1 / (1 - a)))


def sample(alpha, size, rng, scale=1.0):
    """Draws with Laplace transform ``exp(-scale * lam**alpha)``."""
    if not 0 < alpha < 1:
        raise ValueError("stability index must be in (0, 1)")
    u = np.pi * rng.random(size)
    e = rng.standard_exponential(size)
    x = (kanter_A(u, alpha) / e) ** ((1 - alpha) / alpha)
    return scale ** (1.0 / alpha) * x


def _angle_rule():
    w, wt = np.polynomial.legendre.leggauss(_NODES)
    w = 0.5 * (w + 1.0)
    wt = 0.5 * wt
    # phi = pi (1 - cos(pi w)) / 2 clusters nodes at both ends of (0, pi)
    phi = 0.5 * np.pi * (1.0 - np.cos(np.pi * w))
    dphi = 0.5 * np.pi ** 2 * np.sin(np.pi * w)
    return phi, wt * dphi / np.pi


_PHI, _WT = _angle_rule()


def cdf(x, alpha, scale=1.0):
    """P(X <= x) for the one-sided stable law ``exp(-scale lam**alpha)``."""
    x = np.asarray(x, dtype=float)
    if alpha == 0.5:
        return levy_cdf(x, scale)
    z = np.where(x > 0, x, 1.0) / scale ** (1.0 / alpha)
    A = kanter_A(_PHI, alpha)
    expo = z[..., None] ** (-alpha / (1 - alpha)) * A
    out = np.exp(-expo) @ _WT
    return np.where(x > 0, out, 0.0)


def pdf(x, alpha, scale=1.0):
    """Density of the one-sided stable law ``exp(-scale lam**alpha)``."""
    x = np.asarray(x, dtype=float)
    if alpha == 0.5:
        return levy_pdf(x, scale)
    c = scale ** (1.0 / alpha)
    z = np.where(x > 0, x, 1.0) / c
    p = alpha / (1 - alpha)
    A = kanter_A(_PHI, alpha)
    zp = z[..., None] ** (-p)
    out = (np.exp(-zp * A) * A * zp) @ _WT * p / z / c
    return np.where(x > 0, out, 0.0)


def levy_pdf(x, scale=1.0):
    """Closed-form density for ``exp(-scale sqrt(lam))``."""
    x = np.asarray(x, dtype=float)
    xs = np.where(x > 0, x, 1.0)
    out = scale / (2 * np.sqrt(np.pi)) * xs ** -1.5 * np.exp(-scale ** 2 / (4 * xs))
    return np.where(x > 0, out, 0.0)


def levy_cdf(x, scale=1.0):
    x = np.asarray(x, dtype=float)
    xs = np.where(x > 0, x, 1.0)
    return np.where(x > 0, special.erfc(scale / (2 * np.sqrt(xs))), 0.0)


def inverse_cdf(x, t, alpha):
    """P(L(t) <= x) for the inverse of the stable subordinator ``exp(-x lam**alpha)``."""
    x = np.asarray(x, dtype=float)
    xs = np.where(x > 0, x, 1.0)
    out = 1.0 - cdf(t * xs ** (-1.0 / alpha), alpha)
    return np.where(x > 0, out, 0.0)
