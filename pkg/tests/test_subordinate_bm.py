import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from nhsub import bernstein as B, stable, subordinate_bm as M
from nhsub.paths import SubordinatorPath, simulate_path
from nhsub.rng import RngStream
from conftest import SIN_INDEX

RAT = B.TimeVaryingIndex


def _rational(a, b, c, d):
    return RAT("rational", (a, b, c, d))


# --- sampling -------------------------------------------------------------


def test_drift_only_is_brownian():
    n = 100_000
    smp = M.sample_subordinate_bm_batch(B.drift_only(1.0), 1e-3, [1.0], 2, n, RngStream(1))
    b1 = smp.positions[:, 0, :]
    assert np.allclose(smp.operational_times, 1.0)
    for j in range(2):
        sq = b1[:, j] ** 2
        assert abs(sq.mean() - 1.0) <= 3 * sq.std(ddof=1) / math.sqrt(n)


def test_frozen_clock_freezes_positions():
    p = SubordinatorPath(np.array([0.2]), np.array([1.5]), np.array([0.0, 1.0]),
                         np.array([0.0, 0.0]), 1.0, 1e-6)
    smp = M.sample_subordinate_bm(p, [0.3, 0.5, 0.9], 2, RngStream(2))
    assert np.array_equal(smp.positions[0, 0], smp.positions[0, 1])
    assert np.array_equal(smp.positions[0, 1], smp.positions[0, 2])
    with pytest.raises(ValueError):
        M.sample_subordinate_bm(p, [0.5, 0.3], 1, RngStream(2))
    with pytest.raises(ValueError):
        M.sample_subordinate_bm(p, [0.5, 1.5], 1, RngStream(2))


def test_single_path_deterministic():
    p = simulate_path(B.multistable(SIN_INDEX), 1e-3, 1.0, RngStream(3))
    a = M.sample_subordinate_bm(p, [0.25, 0.5, 1.0], 3, RngStream(4))
    b = M.sample_subordinate_bm(p, [0.25, 0.5, 1.0], 3, RngStream(4))
    assert np.array_equal(a.positions, b.positions)


def test_increments_conditionally_gaussian():
    # standardized increments are N(0, 1) given the clock
    smp = M.sample_subordinate_bm_batch(B.gamma_like(1.0), 1e-4, [0.5, 1.0], 1, 20_000,
                                        RngStream(5))
    dsig = np.diff(np.concatenate((np.zeros((20_000, 1)), smp.operational_times), axis=1),
                   axis=1)
    db = np.diff(np.concatenate((np.zeros((20_000, 1, 1)), smp.positions), axis=1), axis=1)[..., 0]
    z = (db / np.sqrt(dsig)).ravel()
    assert abs(z.mean()) < 4 / math.sqrt(z.size)
    assert abs(z.var() - 1) < 4 * math.sqrt(2 / z.size)


def test_isotropy_three_dims():
    n = 100_000
    smp = M.sample_subordinate_bm_batch(B.gamma_like(2.0), 1e-4, [1.0], 3, n, RngStream(6))
    x = smp.positions[:, 0, :]
    scalar = float(np.mean(x ** 2))
    for i in range(3):
        for j in range(3):
            prod = x[:, i] * x[:, j]
            se = prod.std(ddof=1) / math.sqrt(n)
            assert abs(prod.mean() - (scalar if i == j else 0.0)) <= 3 * se


# --- characteristic function ----------------------------------------------


def test_charfun_zero_frequency():
    rep = M.charfun_check(B.multistable(0.5), 1e-3, 0.0, 1.0, [[0.0]], 10_000, RngStream(7))
    assert rep.re[0] == 1.0 and rep.im[0] == 0.0 and rep.within().all()


def test_charfun_half_stable():
    xi = [[math.sqrt(2.0)]]     # |xi|^2 / 2 = 1
    rep = M.charfun_check(B.multistable(0.5), 1e-6, 0.0, 1.0, xi, 10_000, RngStream(8))
    assert rep.target[0] == pytest.approx(math.exp(-1), rel=1e-12)
    assert rep.within().all()


def test_charfun_sinusoidal():
    xi = [[2.0], [1.0], [0.5]]
    rep = M.charfun_check(B.multistable(SIN_INDEX), 1e-5, 0.0, 1.0, xi, 20_000, RngStream(9),
                          compensate=True)
    ref, _ = integrate.quad(lambda w: 2.0 ** float(SIN_INDEX(w)), 0.0, 1.0, epsabs=1e-13)
    assert rep.target[0] == pytest.approx(math.exp(-ref), rel=1e-9)
    assert rep.within().all()
    assert np.all(np.abs(rep.im) <= 3 * rep.se_im)


def test_charfun_rejects_few_paths():
    with pytest.raises(ValueError):
        M.charfun_check(B.multistable(0.5), 1e-3, 0.0, 1.0, [[1.0]], 100, RngStream(0))


def test_charfun_laplace_duality_same_paths():
    n = 20_000
    smp = M.sample_subordinate_bm_batch(B.multistable(SIN_INDEX), 1e-4, [1.0], 2, n,
                                        RngStream(10))
    xi = np.array([0.8, -0.6])
    lam = 0.5 * float(xi @ xi)
    c = np.cos(smp.positions[:, 0, :] @ xi)
    e = np.exp(-lam * smp.operational_times[:, 0])
    d = c - e
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / math.sqrt(n)


# --- mean square displacement ---------------------------------------------


def test_msd_quadrature_examples():
    assert B.is_divergent(M.msd_quadrature(B.multistable(0.5), 1.0))
    assert M.msd_quadrature(B.gamma_like(2.0), 3.0) == pytest.approx(1.5, rel=1e-9)
    assert M.msd_quadrature(B.tempered_stable(0.5, 1.0), 2.0) == pytest.approx(1.0, rel=1e-9)
    assert M.msd_quadrature(B.drift_only(1.0), 2.0, dims=3) == pytest.approx(6.0, rel=1e-12)
    assert M.msd_quadrature(B.gamma_like(2.0), 0.0) == 0.0


@settings(max_examples=15)
@given(t1=st.floats(0.1, 3.0), t2=st.floats(0.1, 3.0))
def test_msd_quadrature_additive(t1, t2):
    fam = B.gamma_like(_rational(2, 3, 1, 1))
    total = M.msd_quadrature(fam, t1 + t2)
    part, _ = integrate.quad(lambda s: 1.0 / float(fam.params["alpha"](s)), t1, t1 + t2,
                             epsabs=1e-13)
    assert total == pytest.approx(M.msd_quadrature(fam, t1) + part, rel=1e-8)


def test_msd_mc_gamma_like():
    r = M.msd_mc(B.gamma_like(2.0), 1e-4, 3.0, 1, 100_000, RngStream(11))
    assert not r.divergent and r.target == pytest.approx(1.5)
    assert abs(r.estimate - 1.5) <= 3 * r.se


def test_msd_mc_tempered():
    r = M.msd_mc(B.tempered_stable(0.5, 1.0), 1e-4, 2.0, 2, 50_000, RngStream(12))
    assert abs(r.estimate - 2.0) <= 3 * r.se


def test_msd_mc_multistable_tail_index():
    r = M.msd_mc(B.multistable(0.5), 1e-3, 1.0, 1, 100_000, RngStream(13))
    assert r.divergent and r.estimate is None
    assert 0.4 < r.tail_index < 0.6 and r.tail_k == 1000


def test_hill_on_exact_stable_draws():
    x = stable.sample(0.5, 100_000, RngStream(14).generator())
    assert 0.4 < M.hill_estimator(x) < 0.6
    assert M.hill_estimator(np.random.default_rng(0).pareto(2.0, 100_000) + 1) == pytest.approx(
        2.0, rel=0.1)


# --- regimes --------------------------------------------------------------


def test_regime_diffusive():
    rep = M.classify_regime(B.gamma_like(_rational(2, 3, 1, 1)))
    assert rep.verdict == "diffusive"
    assert rep.constant == pytest.approx(1 / 3, rel=0.01)


def test_regime_superdiffusive():
    assert M.classify_regime(B.gamma_like(_rational(1, 0, 1, 1))).verdict == "superdiffusive"


def test_regime_subdiffusive():
    fam = B.tempered_stable(0.5, _rational(1, 1, 1, 0))
    assert M.classify_regime(fam).verdict == "subdiffusive"


def test_regime_infinite_and_drift():
    assert M.classify_regime(B.multistable(SIN_INDEX)).verdict == "infinite"
    rep = M.classify_regime(B.drift_only(1.0), dims=2)
    assert rep.verdict == "diffusive" and rep.constant == pytest.approx(2.0)


def test_regime_inconclusive_is_reported():
    wobble = B.TimeVaryingIndex("sinusoidal", (1.0, 0.5, 1.0, 0.0))
    rep = M.classify_regime(B.gamma_like(wobble), t_probe_max=1024)
    assert rep.verdict == "inconclusive" and len(rep.probes) == 11
