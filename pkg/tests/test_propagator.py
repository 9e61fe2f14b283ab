import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhsub import bernstein as B, paths as P, propagator as S
from nhsub.rng import RngStream
from conftest import SIN_INDEX, builtin_families


def _rand(dim, seed):
    return np.random.default_rng(seed).standard_normal(dim)


@pytest.fixture
def lap8():
    return S.dirichlet_laplacian(8)


@pytest.fixture
def lap16():
    return S.dirichlet_laplacian(16)


# --- operator -------------------------------------------------------------


def test_dirichlet_closed_form_matches_matrix():
    m = 12
    A = S.dirichlet_laplacian(m)
    dx = math.pi / (m + 1)
    mat = 0.5 * (-2 * np.eye(m) + np.eye(m, k=1) + np.eye(m, k=-1)) / dx ** 2
    assert np.allclose(A.matrix(), mat, atol=1e-11 * np.abs(mat).max())
    assert np.all(A.eigenvalues < 0)
    # lowest mode tends to -1/2 for the continuum operator on (0, pi)
    assert A.eigenvalues.max() == pytest.approx(-0.5, rel=0.01)


def test_operator_validation():
    with pytest.raises(ValueError):
        S.SpectralOperator(np.array([1.0, -1.0]), np.eye(2))
    with pytest.raises(ValueError):
        S.SpectralOperator(np.array([-1.0, -1.0]), np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        S.SpectralOperator.from_matrix(np.array([[-1.0, 0.5], [0.0, -1.0]]))
    with pytest.raises(ValueError):
        S.dirichlet_laplacian(4).coefficients(np.ones(3))


# --- semigroup ------------------------------------------------------------


def test_semigroup_examples(lap8):
    u = _rand(8, 1)
    assert np.array_equal(S.apply_semigroup(lap8, 0.0, u), u)
    e3 = lap8.eigenvectors[:, 3]
    assert np.allclose(S.apply_semigroup(lap8, 0.7, e3), math.exp(0.7 * lap8.eigenvalues[3]) * e3,
                       atol=1e-14)
    with pytest.raises(ValueError):
        S.apply_semigroup(lap8, -1.0, u)


def test_semigroup_contraction(lap8):
    gen = np.random.default_rng(2)
    for _ in range(100):
        u = gen.standard_normal(8)
        assert np.linalg.norm(S.apply_semigroup(lap8, 1.0, u)) <= np.linalg.norm(u)


@settings(max_examples=20)
@given(a=st.floats(0.0, 3.0), b=st.floats(0.0, 3.0))
def test_semigroup_property(a, b):
    A = S.dirichlet_laplacian(6)
    u = _rand(6, 3)
    lhs = S.apply_semigroup(A, a, S.apply_semigroup(A, b, u))
    assert np.allclose(lhs, S.apply_semigroup(A, a + b, u), atol=1e-13)


# --- propagator -----------------------------------------------------------


def test_propagator_same_time_is_identity(lap8):
    u = _rand(8, 4)
    assert np.array_equal(S.apply_propagator(lap8, B.multistable(0.5), 0.4, 0.4, u), u)


def test_propagator_drift_only_is_semigroup(lap8):
    u = _rand(8, 5)
    got = S.apply_propagator(lap8, B.drift_only(1.0), 0.3, 1.1, u)
    assert np.allclose(got, S.apply_semigroup(lap8, 0.8, u), rtol=0, atol=1e-13)


def test_propagator_matches_mc(lap8):
    # T_{s,t} u = E T_{sigma(t) - sigma(s)} u
    u = _rand(8, 6)
    fam = B.multistable(0.5)
    n = 10_000
    w = P.sample_increments(fam, 1e-6, [0.0, 1.0], n, RngStream(7), compensate=True)[:, 1]
    c = lap8.coefficients(u)
    draws = (np.exp(w[:, None] * lap8.eigenvalues[None, :]) * c) @ lap8.eigenvectors.T
    est = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(n)
    exact = S.apply_propagator(lap8, fam, 0.0, 1.0, u)
    assert np.all(np.abs(est - exact) <= 3 * se)


def test_propagator_rejects_reversed_times(lap8):
    with pytest.raises(ValueError):
        S.apply_propagator(lap8, B.multistable(0.5), 1.0, 0.5, np.ones(8))


# --- propagator law and invariants ----------------------------------------


def test_law_trivial_cases(lap16):
    u = _rand(16, 8)
    fam = B.multistable(SIN_INDEX)
    assert S.check_propagator_law(lap16, fam, 0.5, 0.5, 0.5, u) == 0.0
    assert S.check_propagator_law(lap16, B.drift_only(1.0), 0.0, 0.7, 1.3, u) <= 1e-13


def test_law_sinusoidal(lap16):
    u = _rand(16, 9)
    fam = B.multistable(SIN_INDEX)
    assert S.check_propagator_law(lap16, fam, 0.0, 0.7, 1.3, u, tol=1e-10) <= 1e-8


@pytest.mark.parametrize("fam", builtin_families(), ids=lambda f: f.describe())
def test_contraction_commutation_symmetry(fam, lap16):
    gen = np.random.default_rng(10)
    A = lap16.matrix()
    for _ in range(3):
        u, v = gen.standard_normal(16), gen.standard_normal(16)
        Tu = S.apply_propagator(lap16, fam, 0.2, 1.4, u)
        Tv = S.apply_propagator(lap16, fam, 0.2, 1.4, v)
        assert np.linalg.norm(Tu) <= np.linalg.norm(u) * (1 + 1e-12)
        comm = A @ Tu - S.apply_propagator(lap16, fam, 0.2, 1.4, A @ u)
        assert np.abs(comm).max() <= 1e-10 * max(1.0, np.abs(A @ Tu).max())
        assert abs(Tu @ v - u @ Tv) <= 1e-10 * max(1.0, abs(Tu @ v))


# --- generators -----------------------------------------------------------


def test_generator_spectral_drift_only(lap8):
    u = _rand(8, 11)
    assert np.allclose(S.generator_spectral(lap8, B.drift_only(1.0), 0.5, u), lap8.matrix() @ u,
                       atol=1e-12)


def test_generator_spectral_eigen_action(lap8):
    fam = B.multistable(SIN_INDEX)
    t = 0.9
    a = float(SIN_INDEX(t))
    e2 = lap8.eigenvectors[:, 2]
    expect = -((-lap8.eigenvalues[2]) ** a) * e2
    assert np.allclose(S.generator_spectral(lap8, fam, t, e2), expect, atol=1e-12)


def test_generator_spectral_linear(lap8):
    fam = B.tempered_stable(0.5, 1.0)
    u, v = _rand(8, 12), _rand(8, 13)
    lhs = S.generator_spectral(lap8, fam, 0.3, u + v)
    rhs = S.generator_spectral(lap8, fam, 0.3, u) + S.generator_spectral(lap8, fam, 0.3, v)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * np.abs(lhs).max())


def test_phillips_drift_only(lap8):
    u = _rand(8, 14)
    got = S.generator_phillips(lap8, B.drift_only(2.0), 0.5, u)
    assert np.allclose(got, 2.0 * (lap8.matrix() @ u), atol=1e-12)


def test_phillips_multistable_matches_spectral(lap8):
    u = _rand(8, 15)
    fam = B.multistable(0.5)
    spec = S.generator_spectral(lap8, fam, 0.0, u)
    phil = S.generator_phillips(lap8, fam, 0.0, u, tol=1e-8)
    assert np.abs(phil - spec).max() <= 10 * 1e-8 * max(1.0, np.abs(spec).max())


@pytest.mark.parametrize("fam", builtin_families(), ids=lambda f: f.describe())
def test_phillips_matches_spectral_all_families(fam, lap16):
    u = _rand(16, 16)
    spec = S.generator_spectral(lap16, fam, 0.8, u)
    res = S.generator_phillips(lap16, fam, 0.8, u, eps_split=1e-4, tol=1e-8, diagnostics=True)
    assert np.abs(res.value - spec).max() / np.abs(spec).max() <= 1e-6
    assert res.split_bound >= 0


def test_phillips_fixed_point_on_periodic():
    A = S.periodic_laplacian(8)
    u = np.full(8, 1.7)
    assert np.abs(A.matrix() @ u).max() < 1e-12
    for fam in (B.multistable(0.5), B.gamma_like(1.0)):
        assert np.abs(S.generator_phillips(A, fam, 0.3, u, tol=1e-8)).max() <= 1e-8


# --- evolution equation ---------------------------------------------------


def test_evolution_zero_vector(lap16):
    assert S.check_evolution(lap16, B.multistable(SIN_INDEX), 0.0, 1.0, np.zeros(16),
                             1e-3) == 0.0


def test_evolution_requires_room(lap16):
    with pytest.raises(ValueError):
        S.check_evolution(lap16, B.multistable(0.5), 0.5, 0.6, np.ones(16), 0.2)


@pytest.mark.parametrize("fam", [B.drift_only(1.0), B.multistable(SIN_INDEX)],
                         ids=["drift-only", "multistable-sin"])
def test_evolution_second_order(fam, lap16):
    u = _rand(16, 17)
    d = [S.check_evolution(lap16, fam, 0.0, 1.0, u, h) for h in (1e-3, 5e-4, 2.5e-4)]
    assert 3.5 <= d[0] / d[1] <= 4.5
    assert 3.5 <= d[1] / d[2] <= 4.5


# --- CSV ------------------------------------------------------------------


def test_eigenpairs_round_trip(tmp_path, lap8):
    S.write_eigenpairs_csv(lap8, tmp_path / "e.csv")
    text = (tmp_path / "e.csv").read_text().splitlines()
    assert text[0] == "# nhsub v1"
    back = S.read_eigenpairs_csv(tmp_path / "e.csv")
    assert np.array_equal(back.eigenvalues, lap8.eigenvalues)
    assert np.array_equal(back.eigenvectors, lap8.eigenvectors)
