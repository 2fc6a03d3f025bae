import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ndscc.model import DomainError
from ndscc.scc import (SensitivitySurface, SurfaceSource, eta_pl, eta_scc, speedup,
                       speedup_asymptote, speedup_curve, spin_snr, spin_snr_surface_expected,
                       spin_snr_surface_from_sim)
from ndscc.simulator import SpinParams, scc_sequence

TAU = np.geomspace(2e-6, 2e-3, 31)
POW = np.geomspace(4e-3, 4e-2, 5)
TW = np.geomspace(1e-7, 1e-2, 41)


def _rising_surface(scale=1.0):
    # SNR grows with tau_r and saturates; brighter rows saturate later
    rows = [scale * (0.3 + 0.1 * k) * (1 - np.exp(-TAU / (20e-6 * (k + 1)))) for k in range(POW.size)]
    return SensitivitySurface(POW, TAU, np.array(rows), 5e-6)


def _brute(surface, tau_w):
    cost = np.sqrt(surface.tau_i + tau_w + surface.tau_grid)[None, :] / surface.snr
    i, j = np.unravel_index(np.argmin(cost), cost.shape)
    return cost[i, j], surface.tau_grid[j], surface.power_grid[i]


surfaces = st.integers(0, 2 ** 32 - 1).map(
    lambda s: SensitivitySurface(POW, TAU, np.random.default_rng(s).uniform(0.01, 1.0, (POW.size, TAU.size)),
                                 5e-6))


# -- surface type ------------------------------------------------------------------------------


def test_surface_validation():
    with pytest.raises(ValueError):
        SensitivitySurface(POW[::-1], TAU, np.ones((POW.size, TAU.size)))
    with pytest.raises(ValueError):
        SensitivitySurface(POW, TAU, np.ones((2, 2)))
    with pytest.raises(ValueError):
        SensitivitySurface(POW, TAU, np.full((POW.size, TAU.size), np.nan))
    s = SensitivitySurface(POW, TAU, np.ones((POW.size, TAU.size)), source="MEASURED_FILE")
    assert s.source is SurfaceSource.MEASURED_FILE


def test_spin_snr_formula():
    assert spin_snr(10.0, 6.0) == pytest.approx(1.0)
    assert spin_snr(6.0, 10.0) == pytest.approx(1.0)
    assert spin_snr(0.0, 0.0) == 0.0


# -- eta_scc -------------------------------------------------------------------------------------


def test_eta_scc_single_cell_example():
    s = SensitivitySurface([0.044], [173e-6], [[0.5]], 5e-6)
    opt = eta_scc(s, 0.0)
    assert opt.eta == pytest.approx(math.sqrt(178e-6) / 0.5, rel=1e-15)
    assert opt.eta == pytest.approx(0.0267, abs=5e-5)
    assert (opt.tau_r, opt.power) == (173e-6, 0.044)


def test_eta_scc_constant_surface_picks_shortest_readout():
    s = SensitivitySurface(POW, TAU, np.full((POW.size, TAU.size), 0.4), 5e-6)
    for tw in (0.0, 1e-5, 1e-3):
        assert eta_scc(s, tw).tau_r == TAU[0]


def test_eta_scc_all_zero_is_an_error():
    with pytest.raises(ValueError):
        eta_scc(SensitivitySurface(POW, TAU, np.zeros((POW.size, TAU.size))), 0.0)
    with pytest.raises(DomainError):
        eta_scc(_rising_surface(), -1.0)


@given(surfaces, st.floats(0, 1e-2))
def test_eta_scc_matches_brute_force(surface, tau_w):
    opt = eta_scc(surface, tau_w)
    eta_b, tau_b, p_b = _brute(surface, tau_w)
    assert (opt.tau_r, opt.power) == (tau_b, p_b)
    assert opt.eta_grid == eta_b
    assert opt.eta <= eta_b
    j = int(np.nonzero(TAU == opt.tau_r)[0][0])
    assert TAU[max(j - 1, 0)] <= opt.tau_r_refined <= TAU[min(j + 1, TAU.size - 1)]


def test_optimal_readout_nondecreasing_in_wait_time():
    s = _rising_surface()
    taus = [eta_scc(s, tw).tau_r for tw in np.geomspace(1e-7, 1e-2, 20)]
    assert all(b >= a for a, b in zip(taus, taus[1:]))
    assert taus == [_brute(s, tw)[1] for tw in np.geomspace(1e-7, 1e-2, 20)]


@given(surfaces, st.integers(0, POW.size - 1), st.integers(0, TAU.size - 1), st.floats(0.0, 1.0),
       st.floats(0, 1e-3))
def test_eta_scc_nonincreasing_in_signal(surface, i, j, bump, tau_w):
    snr = surface.snr.copy()
    snr[i, j] += bump
    better = SensitivitySurface(POW, TAU, snr, surface.tau_i)
    assert eta_scc(better, tau_w).eta_grid <= eta_scc(surface, tau_w).eta_grid


@given(surfaces)
def test_eta_scc_nondecreasing_in_wait_time(surface):
    etas = [eta_scc(surface, tw).eta for tw in TW]
    assert all(b >= a * (1 - 1e-12) for a, b in zip(etas, etas[1:]))


# -- eta_pl -----------------------------------------------------------------------------------


def test_eta_pl_examples():
    got = eta_pl(0.19, 300e-9, 5e-6, 0.0)
    assert got == pytest.approx(math.sqrt(5.3e-6) / 0.19, rel=1e-15)
    assert got == pytest.approx(0.01212, abs=5e-6)
    tw = 1.0
    assert eta_pl(0.19, 300e-9, 5e-6, tw) == pytest.approx(math.sqrt(tw) / 0.19, rel=1e-5)
    for x in TW:
        assert eta_pl(0.38, 300e-9, 5e-6, x) == pytest.approx(eta_pl(0.19, 300e-9, 5e-6, x) / 2, rel=1e-15)
    with pytest.raises(DomainError):
        eta_pl(0.0)


# -- speedup ------------------------------------------------------------------------------------


def test_speedup_identical_curves():
    eta = np.linspace(1.0, 2.0, TW.size)
    sc = speedup(eta, eta, TW)
    assert np.all(sc.f_values == 1.0)
    assert sc.break_even == TW[0]


def test_speedup_never_crossing():
    sc = speedup(np.ones(5), 2 * np.ones(5), np.arange(1.0, 6.0))
    assert sc.break_even is None
    assert np.all(sc.f_values == 0.25)


def test_speedup_linear_bisection():
    sc = speedup(np.array([1.0, 1.0]), np.array([2.0, 0.5]), np.array([0.0, 1.0]))
    # F goes 0.25 -> 4, crossing 1 at 0.75/3.75
    assert sc.break_even == pytest.approx(0.2, rel=1e-10)


def test_asymptote_example():
    assert speedup_asymptote(3.8 * 0.19, 0.19) == pytest.approx(14.44, rel=1e-14)
    assert abs(speedup_asymptote(0.722, 0.19) - 14.44) < 0.01


@given(surfaces, st.floats(0.05, 0.5))
def test_speedup_squared_ratio_and_limit(surface, snr_pl):
    curve = speedup_curve(surface, snr_pl, TW)
    for x, f in zip(TW, curve.f_values):
        want = (eta_pl(snr_pl, 300e-9, surface.tau_i, x) / eta_scc(surface, x).eta) ** 2
        assert f == pytest.approx(want, rel=1e-15)
    far = 1e4 * (surface.tau_i + TAU.max())
    f_far = speedup_curve(surface, snr_pl, [far]).f_values[0]
    assert abs(f_far - curve.asymptote) / curve.asymptote < 0.01
    assert curve.asymptote == (surface.best_snr / snr_pl) ** 2
    assert np.all(curve.f_values > 0)


def test_break_even_is_a_crossing():
    s = _rising_surface()
    curve = speedup_curve(s, 0.19, TW)
    assert curve.break_even is not None
    tb = curve.break_even
    f = (eta_pl(0.19, 300e-9, s.tau_i, tb) / eta_scc(s, tb).eta) ** 2
    assert f == pytest.approx(1.0, abs=1e-9)


# -- surfaces from the simulator ------------------------------------------------------------------


def test_surface_no_spin_contrast(scc_ens):
    sp = SpinParams(780e-6, 50e-6, 0.6, 0.1, 0.5, 0.5, 0.9)
    shots = 20_000
    tmpl = scc_sequence(0.02, 100e-6)
    s = spin_snr_surface_from_sim(scc_ens, sp, tmpl, [0.01, 0.02], [20e-6, 200e-6], shots, seed=1)
    assert np.all(np.abs(s.snr) < 3 / math.sqrt(shots))
    assert np.all(s.snr_se > 0)


def test_surface_shape_against_pl_baseline(scc_ens, spin, default_cfg):
    exp = spin_snr_surface_expected(scc_ens, spin, scc_sequence(0.02, 100e-6), POW, TAU)
    # every row rises first; at the highest power it peaks inside the grid and falls
    assert np.all(np.diff(exp.snr[:, :15], axis=1) > 0)
    top = exp.snr[-1]
    j = int(np.argmax(top))
    assert 0 < j < TAU.size - 1 and top[-1] < 0.8 * top[j]
    # the best-power envelope overtakes the PL baseline near 10 us
    env = exp.snr.max(axis=0)
    pl = default_cfg["scc"]["snr_pl"]
    cross = TAU[int(np.argmax(env > pl))]
    assert env[0] < pl and 3e-6 < cross < 30e-6


def test_surface_threads_and_seeds(scc_ens, spin):
    tmpl = scc_sequence(0.02, 100e-6)
    grid = ([0.01, 0.03], [50e-6, 400e-6])
    a = spin_snr_surface_from_sim(scc_ens, spin, tmpl, *grid, 2000, seed=4, threads=1)
    b = spin_snr_surface_from_sim(scc_ens, spin, tmpl, *grid, 2000, seed=4, threads=3)
    assert a.same_as(b) and np.array_equal(a.snr_se, b.snr_se)
    with pytest.raises(ValueError):
        spin_snr_surface_from_sim(scc_ens, spin, tmpl, *grid, 999, seed=4)


def test_standard_error_follows_sqrt_n(scc_ens, spin):
    tmpl = scc_sequence(0.02, 100e-6)
    spread = {}
    for n in (2000, 8000):
        vals = [spin_snr_surface_from_sim(scc_ens, spin, tmpl, [0.02], [200e-6], n, seed=s).snr[0, 0]
                for s in range(40)]
        spread[n] = np.std(vals, ddof=1)
    # quadrupling the shots halves the spread; 40 seeds give ~11 % scatter per estimate
    assert spread[2000] / spread[8000] == pytest.approx(2.0, rel=0.35)
