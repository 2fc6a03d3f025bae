import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ndscc import fitting
from ndscc.model import Pump, evaluate
from ndscc.simulator import (Ensemble, EnsembleConfig, LogNormal, NVParams, PLReadoutModel,
                             SequenceError, SpinParams, SpinState, analytic_population,
                             evolve_spin, expected_charge_model,
                             expected_charge_rate, expected_scc_counts, expected_tunneling_fraction,
                             power_scaling_fit, scc_count_variance, scc_sequence,
                             simulate_charge_trace, simulate_kmc, simulate_model_trace,
                             simulate_scc_shot, simulate_scc_shots)
from ndscc.simulator import (Pulse, PulseSequence, post_scc_minus_probability,
                             probe_state_counts)
from oracles import rk4_population, rk4_population_batch


def _nv(g=1e3, r=3e3, **kw):
    args = dict(ion_lin=g, ion_quad=0.0, rec_lin=r, rec_quad=0.0, emission_coeff=1e5,
                sat_power=4.3, p_minus_init_532=0.75, p_minus_init_592=0.3)
    args.update(kw)
    return NVParams(**args)


def _random_nvs(rng, n):
    out = []
    for _ in range(n):
        ion = rng.lognormal(np.log([3e5, 2e6]), 1.5)
        rec = rng.lognormal(np.log([3e5, 2e6]), 1.5)
        # occasionally switch one channel off
        if rng.random() < 0.2:
            ion[rng.integers(2)] = 0.0
        if rng.random() < 0.2:
            rec[rng.integers(2)] = 0.0
        out.append(NVParams(ion[0], ion[1], rec[0], rec[1], 1e5, 4.3, 0.8, 0.2))
    return out


# -- analytic population -------------------------------------------------------------


def test_population_example_against_rk4():
    nv = _nv()
    got = analytic_population(nv, 1.0, 1.0, 1e-3)
    assert got == pytest.approx(0.75 + 0.25 * math.exp(-4.0), rel=1e-15)
    assert abs(got - rk4_population(1e3, 3e3, 1.0, 1e-3, h=1e-7)) < 1e-6
    assert got == pytest.approx(0.7546, abs=5e-5)


def test_population_trivial_cases():
    nv = _nv()
    p_ss = 0.75
    assert analytic_population(nv, 1.0, p_ss, np.array([0.0, 1e-4, 1.0])) == pytest.approx(p_ss)
    assert analytic_population(nv, 1.0, 0.3, 0.0) == 0.3
    # dark evolution is frozen
    assert analytic_population(nv, 0.0, 0.42, 10.0) == 0.42


def test_population_dark_recombination_flag():
    nv = _nv()
    got = analytic_population(nv, 0.0, 0.2, 1.0, dark_recombination=10.0)
    assert got == pytest.approx(1.0 - 0.8 * math.exp(-10.0))


@pytest.mark.parametrize("kw", [dict(probe_power=-1.0), dict(t=-1.0), dict(p_minus_0=1.5)])
def test_population_domain(kw):
    args = dict(probe_power=1.0, p_minus_0=0.5, t=1e-3)
    args.update(kw)
    with pytest.raises(ValueError):
        analytic_population(_nv(), **args)


def test_population_matches_rk4_over_1000_trials():
    rng = np.random.default_rng(11)
    nvs = _random_nvs(rng, 1000)
    powers = rng.uniform(0.0, 0.1, 1000)
    p0 = rng.uniform(0.0, 1.0, 1000)
    # step <= 1e-7 s
    t = rng.uniform(0.0, 2e-4, 1000)
    g = np.array([nv.ionization_rate(P) for nv, P in zip(nvs, powers)])
    r = np.array([nv.recombination_rate(P) for nv, P in zip(nvs, powers)])
    want = rk4_population_batch(g, r, p0, t, n_steps=2000)
    got = np.array([analytic_population(nv, P, q, s) for nv, P, q, s in zip(nvs, powers, p0, t)])
    assert np.max(np.abs(got - want)) < 1e-6


def test_population_in_unit_interval_over_10000_trials():
    rng = np.random.default_rng(12)
    nvs = _random_nvs(rng, 10_000)
    vals = np.array([
        analytic_population(nv, P, q, s)
        for nv, P, q, s in zip(nvs, rng.uniform(0, 50, 10_000), rng.uniform(0, 1, 10_000),
                               rng.exponential(1e-3, 10_000))
    ])
    assert np.all((vals >= 0.0) & (vals <= 1.0))


@given(st.floats(0, 1e7), st.floats(0, 1e7), st.floats(0, 1e9), st.floats(0, 1e9),
       st.floats(0, 100), st.floats(0, 1), st.floats(0, 10))
def test_population_in_unit_interval_property(il, iq, rl, rq, P, p0, t):
    nv = NVParams(il, iq, rl, rq, 1.0, 1.0, 0.5, 0.2)
    assert 0.0 <= analytic_population(nv, P, p0, t) <= 1.0


# -- ensembles -----------------------------------------------------------------------


def test_nv_invariants():
    with pytest.raises(ValueError):
        _nv(g=-1.0)
    with pytest.raises(ValueError):
        _nv(p_minus_init_532=1.2)
    assert _nv().is_nominal()
    assert not _nv(p_minus_init_532=0.2, p_minus_init_592=0.3).is_nominal()
    assert not _nv(g=0.0).is_nominal()


def test_lognormal_requires_gsd_at_least_one():
    with pytest.raises(ValueError):
        LogNormal(1.0, 0.9)


def test_ensemble_sampling_is_seeded(nd_template):
    a, b = nd_template.sample(), nd_template.sample()
    assert np.array_equal(a.ion_lin, b.ion_lin)
    c = nd_template.with_seed(nd_template.seed + 1).sample()
    assert not np.array_equal(a.ion_lin, c.ion_lin)
    assert a.n_nv == nd_template.n_nv
    assert np.all(a.p_minus_init_592 < a.p_minus_init_532)


def test_empty_ensemble_rejected():
    with pytest.raises(ValueError):
        Ensemble.from_nvs([])
    with pytest.raises(ValueError):
        EnsembleConfig(0, {}, 1)


def test_expected_charge_model_matches_rate(nd_template):
    ens = nd_template.sample()
    t = np.linspace(0, 1e-3, 50)
    for pump in Pump:
        m = expected_charge_model(ens, pump, 0.02)
        assert np.allclose(evaluate(m, t), expected_charge_rate(ens, pump, 0.02, t), rtol=1e-12)


# -- traces ------------------------------------------------------------------------------


def test_no_emitters_gives_zero_trace():
    nv = _nv(g=1e3, r=0.0, rec_quad=0.0, p_minus_init_532=0.0, p_minus_init_592=0.0)
    tr = simulate_charge_trace(nv, Pump.PUMP_532, 0.02, 1e-3, 50, 1000, seed=1)
    assert tr.counts.sum() == 0


@pytest.mark.parametrize("kw", [dict(duration=0.0), dict(n_bins=1), dict(shots=0)])
def test_trace_domain(kw):
    args = dict(duration=1e-3, n_bins=10, shots=10)
    args.update(kw)
    with pytest.raises(ValueError):
        simulate_charge_trace(_nv(), Pump.PUMP_532, 0.02, seed=1, **args)


def test_non_finite_rate_rejected():
    m = expected_charge_model(Ensemble.from_nvs([_nv()]), Pump.PUMP_532, 1.0)
    with pytest.raises(ValueError):
        simulate_model_trace(m, 1e-3, 10, 10 ** 308, seed=1)
    with pytest.raises(ValueError):
        simulate_model_trace(m, 1e-3, 10, 10 ** 308, noiseless=True)


def test_trace_seed_determinism(nd_template):
    a = simulate_charge_trace(nd_template, Pump.PUMP_592, 0.02, 1e-3, 100, 10 ** 5, seed=7)
    b = simulate_charge_trace(nd_template, Pump.PUMP_592, 0.02, 1e-3, 100, 10 ** 5, seed=7)
    c = simulate_charge_trace(nd_template, Pump.PUMP_592, 0.02, 1e-3, 100, 10 ** 5, seed=8)
    assert np.array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)
    assert "Philox" in a.metadata["rng"]


def test_large_shot_trace_within_poisson_bounds(nd_template):
    ens = nd_template.sample()
    tr = simulate_charge_trace(ens, Pump.PUMP_532, 0.02, 1e-3, 250, 10 ** 7, seed=3)
    mean = expected_charge_rate(ens, Pump.PUMP_532, 0.02, tr.bin_starts) * tr.bin_width * 1e7
    inside = np.abs(tr.counts - mean) <= 3.0 * np.sqrt(mean)
    assert inside.mean() >= 0.99


def test_heterogeneous_noiseless_trace_needs_several_terms():
    dist = {name: LogNormal(m, 3.0) for name, m in [
        ("ion_lin", 3e5), ("ion_quad", 2e6), ("rec_lin", 3e5), ("rec_quad", 2e6)]}
    dist.update(emission_coeff=LogNormal(1.5e5, 1.0), sat_power=LogNormal(4.3, 1.0),
                p_minus_init_532=LogNormal(0.75, 1.0), p_minus_init_592=LogNormal(0.3, 1.0))
    ens = EnsembleConfig(12, dist, seed=5).sample()
    model = expected_charge_model(ens, Pump.PUMP_532, 0.02)
    tr = simulate_model_trace(model, 1e-3, 250, 10 ** 9, noiseless=True)
    assert fitting.select_model(tr, 3).chosen_n >= 2


# -- spin --------------------------------------------------------------------------------


def test_evolve_spin_examples(spin):
    assert evolve_spin(spin, 0.9, 0.0, False) == pytest.approx(0.9, rel=1e-15)
    assert evolve_spin(spin, 0.9, 1.0, False) == pytest.approx(1 / 3)
    got = evolve_spin(spin, 1.0, 390e-6, False)
    assert got == pytest.approx(1 / 3 + 2 / 3 * math.exp(-0.5), rel=1e-15)
    assert got == pytest.approx(0.7376, abs=1e-4)
    assert evolve_spin(spin, 1.0, 390e-6, True) < got
    with pytest.raises(ValueError):
        evolve_spin(spin, 1.0, -1.0, False)


def test_spin_params_nominal(spin):
    assert spin.is_nominal()
    with pytest.raises(ValueError):
        SpinParams(1e-3, 1e-4, 1.2, 0.1, 0.9, 0.1, 0.9)
    assert not SpinParams(1e-3, 1e-4, 0.5, 0.5, 0.9, 0.1, 0.9).is_nominal()


def test_pulse_validation():
    with pytest.raises(ValueError):
        Pulse("probe", 592, 0.01, 0.0)
    with pytest.raises(ValueError):
        PulseSequence((Pulse("probe", 592, 0.01, 1e-6, True), Pulse("probe", 592, 0.01, 1e-6, True)))
    seq = PulseSequence((Pulse("init", 532, 1.0, 1e-6), Pulse("probe", 592, 0.01, 1e-6, True)))
    with pytest.raises(SequenceError, match="shelve"):
        seq.validate_scc()
    with pytest.raises(SequenceError):
        simulate_scc_shots(_nv(), SpinParams(1e-3, 1e-4, 1, 0, 1, 0, 1), seq, 10, 1, SpinState.MS0)


def test_scc_equal_ionisation_has_no_spin_contrast(scc_ens):
    sp = SpinParams(780e-6, 50e-6, 0.6, 0.1, 0.5, 0.5, 0.9)
    seq = scc_sequence(0.02, 200e-6)
    a0 = expected_scc_counts(scc_ens, sp, seq, 0.9)
    a1 = expected_scc_counts(scc_ens, sp, seq, 0.1)
    assert a0 == pytest.approx(a1, rel=1e-14)
    c0 = simulate_scc_shots(scc_ens, sp, seq, 40_000, seed=1, ms_state=SpinState.MS0)
    c1 = simulate_scc_shots(scc_ens, sp, seq, 40_000, seed=2, ms_state=SpinState.MS1)
    se = math.sqrt((c0.var() + c1.var()) / 40_000)
    assert abs(c0.mean() - c1.mean()) < 4 * se


def test_scc_deterministic_limit():
    # one NV that is certainly NV- before SCC
    nv = _nv(g=3e4, r=3e4, p_minus_init_532=1.0, p_minus_init_592=0.0)
    sp = SpinParams(1e-3, 1e-4, 1.0, 0.0, 1.0, 0.0, 1.0)
    seq = scc_sequence(0.02, 100e-6)
    ens = Ensemble.from_nvs([nv])
    assert post_scc_minus_probability(ens, sp, [1.0], 1.0)[0] == 0.0
    assert post_scc_minus_probability(ens, sp, [1.0], 0.0)[0] == 1.0
    a_minus, a_zero = probe_state_counts(ens, 0.02, 100e-6)
    assert expected_scc_counts(ens, sp, seq, 1.0) == pytest.approx(a_zero[0])
    assert expected_scc_counts(ens, sp, seq, 0.0) == pytest.approx(a_minus[0])
    c_ms0 = simulate_scc_shots(ens, sp, seq, 50_000, seed=4, ms_state=SpinState.MS0)
    c_ms1 = simulate_scc_shots(ens, sp, seq, 50_000, seed=5, ms_state=SpinState.MS1)
    # pure Poisson in this limit
    assert abs(c_ms0.mean() - a_zero[0]) < 4 * math.sqrt(a_zero[0] / 50_000)
    assert abs(c_ms1.mean() - a_minus[0]) < 4 * math.sqrt(a_minus[0] / 50_000)


def test_scc_snr_matches_semi_analytic(scc_ens, spin):
    seq = scc_sequence(0.02, 200e-6)
    n = 100_000
    c0 = simulate_scc_shots(scc_ens, spin, seq, n, seed=9, ms_state=SpinState.MS0)
    c1 = simulate_scc_shots(scc_ens, spin, seq, n, seed=10, ms_state=SpinState.MS1)
    a0 = expected_scc_counts(scc_ens, spin, seq, spin.ms0_population(SpinState.MS0))
    a1 = expected_scc_counts(scc_ens, spin, seq, spin.ms0_population(SpinState.MS1))
    mc = abs(c0.mean() - c1.mean()) / math.sqrt(c0.mean() + c1.mean())
    semi = abs(a0 - a1) / math.sqrt(a0 + a1)
    assert mc == pytest.approx(semi, rel=0.05)
    assert c0.var() == pytest.approx(
        scc_count_variance(scc_ens, spin, seq, spin.ms0_population(SpinState.MS0)), rel=0.05)


def test_scc_shots_seeded(scc_ens, spin):
    seq = scc_sequence(0.02, 50e-6)
    a = simulate_scc_shots(scc_ens, spin, seq, 1000, seed=3, ms_state=SpinState.MS1)
    b = simulate_scc_shots(scc_ens, spin, seq, 1000, seed=3, ms_state=SpinState.MS1)
    assert np.array_equal(a, b)
    assert isinstance(simulate_scc_shot(scc_ens, spin, seq, SpinState.MS0, seed=3), int)
    with pytest.raises(ValueError):
        simulate_scc_shots(scc_ens, spin, seq, 10, seed=3)


# -- event-level Monte Carlo ---------------------------------------------------------------


def test_tunnelling_fraction_default(nd_template, default_cfg):
    d = nd_template.distributions
    nv = NVParams(*(d[k].median for k in ("ion_lin", "ion_quad", "rec_lin", "rec_quad",
                                          "emission_coeff", "sat_power", "p_minus_init_532",
                                          "p_minus_init_592")))
    power = default_cfg["kmc"]["power_mW"]
    res = simulate_kmc(nv, power, 1e-3, 200, seed=1)
    assert res.overflow == 0
    assert res.tunneling_fraction == pytest.approx(expected_tunneling_fraction(nv, power),
                                                   abs=4 * res.tunneling_fraction_stderr)
    assert 0.025 <= res.tunneling_fraction <= 0.035


def test_tunnelling_fraction_is_configurable():
    lo = expected_tunneling_fraction(_nv(g=1e3, r=1e3, ion_quad=1e6, rec_quad=1e6), 0.01)
    hi = expected_tunneling_fraction(_nv(g=1e5, r=1e5, ion_quad=1e6, rec_quad=1e6), 0.01)
    assert hi > lo > 0
    assert expected_tunneling_fraction(_nv(g=0.0, r=0.0, ion_quad=1e6, rec_quad=1e6), 0.01) == 0


def test_kmc_rates_match_two_state_model():
    nv = _nv(g=3.6e5, r=3.6e5, ion_quad=2.4e6, rec_quad=2.4e6)
    res = simulate_kmc(nv, 0.04, 2e-3, 300, seed=2)
    assert res.ionization_rate == pytest.approx(nv.ionization_rate(0.04), rel=0.03)
    assert res.recombination_rate == pytest.approx(nv.recombination_rate(0.04), rel=0.03)


def test_power_scaling_small():
    nv = _nv(g=3.6e5, r=3.6e5, ion_quad=2.4e6, rec_quad=2.4e6)
    out = power_scaling_fit(nv, [0.01, 0.02, 0.04, 0.08], 200_000, seed=1)
    lin, quad = out["total_coeffs"]
    assert lin == pytest.approx(7.2e5, rel=0.03)
    assert quad == pytest.approx(4.8e6, rel=0.03)


# -- PL readout model --------------------------------------------------------------------------


def test_pl_readout_model():
    m = PLReadoutModel(9.11e7, 0.67, 0.3, 2.0, 40e-9, 0.0)
    assert m.rate(0.67) == pytest.approx(9.11e7 / 2)
    # m_s=0 is the bright state
    assert m.counts(1.0, 0.1, 300e-9) > m.counts(0.0, 0.1, 300e-9)
    assert m.spin_snr(0.1, 300e-9, 0.5) == 0.0
    with pytest.raises(ValueError):
        m.counts(1.0, 0.0, 1e-6)
    with pytest.raises(ValueError):
        PLReadoutModel(1.0, 1.0, 1.5, 1.0, 1.0)
