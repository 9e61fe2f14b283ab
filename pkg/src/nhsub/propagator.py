"""Subordinate propagators ``T_{s,t} = exp(-int_s^t f(-A, tau) dtau)`` for symmetric ``A <= 0``.

Operators are stored by their eigendecomposition; the generator has a
spectral form ``-f(-A, t)`` and a Phillips form
``b'(t) A u + int_0^inf (T_s u - u) nu(ds, t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .bernstein import eval_f, eval_Pi, small_jump_mean, QuadratureError

__all__ = [
    "SpectralOperator",
    "apply_propagator",
    "apply_semigroup",
    "check_evolution",
    "check_propagator_law",
    "dirichlet_laplacian",
    "generator_phillips",
    "generator_spectral",
    "periodic_laplacian",
    "read_eigenpairs_csv",
    "write_eigenpairs_csv",
]


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """``A = V diag(eigenvalues) V^T`` with orthonormal ``V`` and eigenvalues ``<= 0``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        vec = np.asarray(self.eigenvectors, dtype=float)
        if vec.shape != (len(lam), len(lam)):
            raise ValueError("eigenvector matrix must be square and match the eigenvalues")
        scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
        if np.any(lam > 1e-12 * scale):
            raise ValueError("operator must be negative semidefinite")
        if np.abs(vec.T @ vec - np.eye(len(lam))).max() > 1e-12:
            raise ValueError("eigenvectors are not orthonormal to 1e-12")
        object.__setattr__(self, "eigenvalues", np.minimum(lam, 0.0))
        object.__setattr__(self, "eigenvectors", vec)

    @property
    def dim(self):
        return len(self.eigenvalues)

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
            raise ValueError("matrix is not symmetric")
        lam, vec = np.linalg.eigh(0.5 * (m + m.T))
        return cls(lam, vec)

    def matrix(self):
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T

    def coefficients(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"vector of length {u.shape} does not match dimension {self.dim}")
        return self.eigenvectors.T @ u

    def synthesize(self, c):
        return self.eigenvectors @ c

    def apply(self, u):
        return self.synthesize(self.eigenvalues * self.coefficients(u))

    def spectral_function(self, phi, u):
        """``sum_i phi(lambda_i) <u, e_i> e_i``."""
        return self.synthesize(np.asarray(phi(self.eigenvalues), dtype=float) * self.coefficients(u))


def dirichlet_laplacian(m, length=np.pi):
    """Half the 3-point Dirichlet Laplacian on ``m`` interior nodes, closed-form eigenpairs."""
    if m < 1:
        raise ValueError("need at least one node")
    dx = length / (m + 1)
    k = np.arange(1, m + 1)
    lam = -0.5 * (4.0 / dx ** 2) * np.sin(k * np.pi / (2 * (m + 1))) ** 2
    j = np.arange(1, m + 1)
    vec = np.sqrt(2.0 / (m + 1)) * np.sin(np.outer(j, k) * np.pi / (m + 1))
    return SpectralOperator(lam, vec)


def periodic_laplacian(m, length=2 * np.pi):
    """Half the 3-point periodic Laplacian (constants in the kernel)."""
    if m < 3:
        raise ValueError("need at least three nodes")
    dx = length / m
    mat = -2.0 * np.eye(m) + np.eye(m, k=1) + np.eye(m, k=-1)
    mat[0, -1] = mat[-1, 0] = 1.0
    return SpectralOperator.from_matrix(0.5 * mat / dx ** 2)


# ---------------------------------------------------------------------------
# semigroup, propagator, generators
# ---------------------------------------------------------------------------


def apply_semigroup(A, w, u):
    """``T_w u = sum_i exp(w lambda_i) <u, e_i> e_i``."""
    if w < 0:
        raise ValueError("w must be nonnegative")
    if w == 0:
        return np.array(u, dtype=float)
    return A.spectral_function(lambda lam: np.exp(w * lam), u)


@lru_cache(maxsize=65536)
def _exponent(family, lam, s, t, tol):
    return eval_Pi(family, lam, t, tol=tol, s=s)


def propagator_exponents(A, family, s, t, tol=1e-10):
    """``int_s^t f(-lambda_i, tau) dtau`` per eigenvalue (cached)."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    return np.array([_exponent(family, float(-lam), float(s), float(t), float(tol))
                     for lam in A.eigenvalues])


def apply_propagator(A, family, s, t, u, tol=1e-10):
    """``T_{s,t} u = sum_i exp(-int_s^t f(-lambda_i, tau) dtau) <u, e_i> e_i``."""
    if s == t:
        return np.array(u, dtype=float)
    e = propagator_exponents(A, family, s, t, tol)
    return A.synthesize(np.exp(-e) * A.coefficients(u))


def generator_spectral(A, family, t, u):
    """``-f(-A, t) u``."""
    vals = np.array([float(eval_f(family, float(-lam), t)) for lam in A.eigenvalues])
    return A.synthesize(-vals * A.coefficients(u))


@dataclass
class PhillipsResult:
    value: np.ndarray
    split_bound: float     # bound on the small-s expansion error
    quad_error: float


def generator_phillips(A, family, t, u, eps_split=1e-4, tol=1e-8, diagnostics=False):
    """``b'(t) A u + int_0^inf (T_s u - u) nu(ds, t)`` evaluated without the spectral symbol.

    ``[0, eps)`` uses ``T_s u - u ~ s A u + s^2 A^2 u / 2``; ``[eps, S]`` adaptive
    vector quadrature in ``log s``; beyond ``S`` the semigroup has decayed to the
    kernel projection and the remainder is ``-(u - P_0 u) nubar(S, t)``.
    """
    u = np.asarray(u, dtype=float)
    c = A.coefficients(u)
    lam = A.eigenvalues
    drift = float(family.drift_rate(t))
    out = drift * A.synthesize(lam * c)
    split_bound = 0.0
    qerr = 0.0
    if family.has_jumps:
        dens = family.jump_density
        m1 = small_jump_mean(family, eps_split, t)
        m2, _ = integrate.quad(lambda s: s * s * float(dens(s, t)), 0.0, eps_split,
                               epsabs=0.0, epsrel=1e-12, limit=200)
        m3, _ = integrate.quad(lambda s: s ** 3 * float(dens(s, t)), 0.0, eps_split,
                               epsabs=0.0, epsrel=1e-12, limit=200)
        Au = A.synthesize(lam * c)
        A2u = A.synthesize(lam ** 2 * c)
        out = out + m1 * Au + 0.5 * m2 * A2u
        split_bound = float(np.linalg.norm(A.synthesize(lam ** 3 * c), np.inf)) * m3 / 6.0

        nonzero = np.abs(lam) > 1e-12 * max(1.0, np.abs(lam).max(initial=0.0))
        if nonzero.any():
            s_max = max(50.0 / float(np.abs(lam[nonzero]).min()), 10 * eps_split)
            c_nz = np.where(nonzero, c, 0.0)
            y0, y1 = np.log(eps_split), np.log(s_max)

            def integrand(y):
                s = np.exp(y)
                return A.synthesize((np.exp(s * lam) - 1.0) * c_nz) * float(dens(s, t)) * s

            val, qerr = integrate.quad_vec(integrand, y0, y1, epsabs=tol * max(1.0, np.abs(u).max()),
                                           epsrel=tol, norm="max", limit=2000)
            if not np.isfinite(qerr) or qerr > 100 * tol * max(1.0, np.abs(val).max()):
                raise QuadratureError("Phillips integral", qerr, tol)
            out = out + val - A.synthesize(c_nz) * float(family.tail(s_max, t))
    if diagnostics:
        return PhillipsResult(out, split_bound, float(qerr))
    return out


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def check_propagator_law(A, family, r, s, t, u, tol=1e-10):
    """``|| T_{s,t} T_{r,s} u - T_{r,t} u ||``."""
    if not r <= s <= t:
        raise ValueError("need r <= s <= t")
    lhs = apply_propagator(A, family, s, t, apply_propagator(A, family, r, s, u, tol), tol)
    rhs = apply_propagator(A, family, r, t, u, tol)
    return float(np.linalg.norm(lhs - rhs))


_GL20 = np.polynomial.legendre.leggauss(20)


def _short_integral(family, lam, a, b):
    x, w = _GL20
    tau = 0.5 * (b - a) * x + 0.5 * (a + b)
    vals = np.array([float(eval_f(family, lam, ti)) for ti in tau])
    return 0.5 * (b - a) * float(vals @ w)


def check_evolution(A, family, s, t, u, h, tol=1e-12):
    """Central-difference defect of ``d/dt T_{s,t} u = -f(-A, t) T_{s,t} u``.

    The exponents at ``t +- h`` are built from the one at ``t`` plus 20-point
    Gauss integrals over ``[t-h, t]`` and ``[t, t+h]``, so quadrature noise
    stays far below the ``O(h^2)`` truncation term.
    """
    if t - h < s:
        raise ValueError("t - h must not precede s")
    c = A.coefficients(u)
    base = propagator_exponents(A, family, s, t, tol)
    up = np.array([_short_integral(family, -lam, t, t + h) for lam in A.eigenvalues])
    down = np.array([_short_integral(family, -lam, t - h, t) for lam in A.eigenvalues])
    # (exp(-(E + up)) - exp(-(E - down))) / 2h, written to avoid cancellation
    diff = np.exp(-base) * (np.expm1(-up) - np.expm1(down)) / (2 * h)
    fd = A.synthesize(diff * c)
    exact = generator_spectral(A, family, t, A.synthesize(np.exp(-base) * c))
    return float(np.linalg.norm(fd - exact))


# ---------------------------------------------------------------------------
# eigenpair CSV
# ---------------------------------------------------------------------------


def write_eigenpairs_csv(A, dest):
    lines = ["# nhsub v1", f"# eigenpairs dim={A.dim}",
             "index,eigenvalue," + ",".join(f"v{j}" for j in range(A.dim))]
    for i in range(A.dim):
        comps = ",".join(repr(float(v)) for v in A.eigenvectors[:, i])
        lines.append(f"{i},{float(A.eigenvalues[i])!r},{comps}")
    with open(dest, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_eigenpairs_csv(src):
    lam, vecs = [], []
    with open(src) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("index"):
                continue
            parts = line.split(",")
            lam.append(float(parts[1]))
            vecs.append([float(v) for v in parts[2:]])
    return SpectralOperator(np.array(lam), np.array(vecs).T)
