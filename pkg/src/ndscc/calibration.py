"""Calibration studies: SCC pulse sweeps, PL readout optimisation, survey.

SCC pulse durations map onto the Bernoulli probabilities of the simulator
through smooth profiles with a single interior optimum:

* shelve, ``(1 - exp(-d / d_s)) exp(-d / tau_dec)``: singlet loading competes
  with decay back out of the singlet during the pulse;
* delay, ``(1 - exp(-d / tau_isc)) exp(-d / tau_m)``: intersystem crossing
  completes before the singlet empties;
* ionise, triplet ``A (1 - exp(-d / a))`` against singlet
  ``A (1 - exp(-d / b))`` with b > a: shelved population is protected only
  until it leaks back to the triplet.

The profile constants are solved once so that the optima sit at the anchor
durations and the probabilities there equal those of the supplied
:class:`~ndscc.simulator.SpinParams`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import fitting, metrics
from ._random import STREAM_NOISE, STREAM_SURVEY, STREAM_SWEEP, make_rng
from .model import Pump
from .simulator import (EnsembleConfig, PLReadoutModel, SpinParams, SpinState, as_ensemble,
                        expected_scc_counts, probe_state_counts, scc_count_variance,
                        scc_sequence, simulate_charge_trace, simulate_scc_shots)


class SweepAxis(str, enum.Enum):
    SHELVE = "SHELVE"
    IONIZE = "IONIZE"
    DELAY = "DELAY"


@dataclass(frozen=True, eq=False)
class SweepResult:
    """Response on a 1-D grid (or 2-D for ``parameter`` tuples) with its argmax."""

    parameter: str | tuple
    grid: np.ndarray | tuple
    unit: str | tuple
    response: np.ndarray
    error: np.ndarray
    argmax: float | tuple
    response_name: str = "contrast"

    @property
    def best(self) -> float:
        return float(np.max(self.response))


# -- SCC pulse mapping ------------------------------------------------------------------


def _peak_decay(rise: float, anchor: float) -> float:
    """Decay time that puts the optimum of (1 - e^{-d/rise}) e^{-d/decay} at ``anchor``."""
    x = anchor / rise
    return rise * math.expm1(x)


def _solve_ionize(p_it: float, p_is: float, anchor: float, kappa: float = math.inf):
    """Return (A, a, b) for the ionisation profiles; see the module docstring.

    With S the shelved fraction, readout contrast along the ionise axis goes
    as ``D / (kappa - p_it + S D)`` with ``D = p_it - p_is``; its stationary
    point ``D' (kappa - p_it) + D p_it' = 0`` is placed at ``anchor``.  An
    infinite ``kappa`` puts the maximum of ``D`` itself there.
    """
    if not 0 < p_is < p_it < 1:
        raise ValueError("ionisation mapping needs 0 < p_ionize_singlet < p_ionize_triplet < 1")
    if not kappa > 1:
        raise ValueError("contrast_offset must exceed 1")
    target = p_is / p_it

    def y_of(x):
        # the singlet exponent follows from p_is / p_it at the anchor
        return -math.log1p(-target * -math.expm1(-x))

    def stationary(x):
        y = y_of(x)
        gx, gy = x * math.exp(-x), y * math.exp(-y)
        if math.isinf(kappa):
            return gx - gy
        amp = p_it / -math.expm1(-x)
        return (gx - gy) * (kappa / amp - (1.0 - math.exp(-x))) + (math.exp(-y) - math.exp(-x)) * gx

    x_min = -math.log1p(-p_it)  # asymptotic probability of one
    if stationary(x_min) <= 0:
        raise ValueError("ionisation anchor cannot be an interior contrast optimum")
    x = optimize.brentq(stationary, x_min, 60.0, xtol=1e-14)
    y = y_of(x)
    amp = min(p_it / -math.expm1(-x), 1.0)
    return amp, anchor / x, anchor / y


def readout_contrast_offset(ensemble, probe_power: float, probe_duration: float,
                            init_wavelength: int = 532) -> float:
    """``kappa = 1 + sum(a_0) / sum((a_- - a_0) p_pre)`` of an SCC readout.

    Mean counts are ``A (kappa - p_ion)`` up to a constant factor, so ``kappa``
    sets how strongly NV0 background dilutes the spin contrast.
    """
    ens = as_ensemble(ensemble)
    a_minus, a_zero = probe_state_counts(ens, probe_power, probe_duration)
    p_pre = ens.p_minus_init_592 if init_wavelength == 592 else ens.p_minus_init_532
    signal = float(np.sum((a_minus - a_zero) * p_pre))
    if not signal > 0:
        raise ValueError("probe carries no charge contrast")
    return 1.0 + float(np.sum(a_zero)) / signal


@dataclass(frozen=True)
class SCCPulseMapping:
    """Durations (s) to SCC probabilities, anchored at the calibrated optima."""

    base: SpinParams
    shelve_anchor: float = 15e-9
    delay_anchor: float = 25e-9
    ionize_anchor: float = 50e-9
    shelve_rise: float = 10e-9
    isc_time: float = 12e-9
    contrast_offset: float = math.inf
    _derived: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        amp, a, b = _solve_ionize(self.base.p_ionize_triplet, self.base.p_ionize_singlet,
                                  self.ionize_anchor, self.contrast_offset)
        derived = dict(
            shelve_decay=_peak_decay(self.shelve_rise, self.shelve_anchor),
            singlet_decay=_peak_decay(self.isc_time, self.delay_anchor),
            ionize_amp=amp, ionize_triplet_time=a, ionize_singlet_time=b,
        )
        object.__setattr__(self, "_derived", derived)

    @classmethod
    def for_readout(cls, base: SpinParams, ensemble, probe_power: float, probe_duration: float,
                    **anchors) -> "SCCPulseMapping":
        """Mapping whose ionise optimum is that of the readout contrast of ``ensemble``."""
        kappa = readout_contrast_offset(ensemble, probe_power, probe_duration)
        return cls(base, contrast_offset=kappa, **anchors)

    @property
    def constants(self) -> dict:
        return dict(self._derived)

    def shelve_profile(self, d):
        d = np.asarray(d, dtype=float)
        return -np.expm1(-d / self.shelve_rise) * np.exp(-d / self._derived["shelve_decay"])

    def delay_profile(self, d):
        d = np.asarray(d, dtype=float)
        return -np.expm1(-d / self.isc_time) * np.exp(-d / self._derived["singlet_decay"])

    def ionize_probabilities(self, d):
        d = np.asarray(d, dtype=float)
        amp = self._derived["ionize_amp"]
        p_it = amp * -np.expm1(-d / self._derived["ionize_triplet_time"])
        p_is = amp * -np.expm1(-d / self._derived["ionize_singlet_time"])
        return p_it, p_is

    def spin_params(self, shelve=None, delay=None, ionize=None) -> SpinParams:
        shelve = self.shelve_anchor if shelve is None else shelve
        delay = self.delay_anchor if delay is None else delay
        ionize = self.ionize_anchor if ionize is None else ionize
        for v in (shelve, delay, ionize):
            if v < 0:
                raise ValueError("pulse durations must be >= 0")
        scale = (float(self.shelve_profile(shelve)) / float(self.shelve_profile(self.shelve_anchor))
                 * float(self.delay_profile(delay)) / float(self.delay_profile(self.delay_anchor)))
        p_it, p_is = self.ionize_probabilities(ionize)
        return replace(
            self.base,
            p_shelf_ms1=float(np.clip(self.base.p_shelf_ms1 * scale, 0.0, 1.0)),
            p_shelf_ms0=float(np.clip(self.base.p_shelf_ms0 * scale, 0.0, 1.0)),
            p_ionize_triplet=float(p_it),
            p_ionize_singlet=float(p_is),
        )


def scc_contrast(alpha_0: float, alpha_1: float) -> float:
    """Spin contrast of SCC readout, ``(alpha_1 - alpha_0) / alpha_1``."""
    return (alpha_1 - alpha_0) / alpha_1 if alpha_1 > 0 else 0.0


def scc_pulse_sweep(ensemble, spin: SpinParams, sweep_axis, grid, shots: int, seed: int,
                    probe_power: float = 0.02, probe_duration: float = 200e-6,
                    mapping: SCCPulseMapping | None = None, backend=None,
                    expected: bool = False) -> SweepResult:
    """SCC contrast while one pulse duration is swept and the others stay at the anchors.

    All grid points reuse the same random stream (common random numbers).
    With ``expected=True`` the response is the closed-form contrast and the
    error is the standard error ``shots`` shots would have.
    """
    axis = SweepAxis(sweep_axis)
    ens = as_ensemble(ensemble)
    mapping = mapping or SCCPulseMapping.for_readout(spin, ens, probe_power, probe_duration)
    g = np.asarray(grid, dtype=float)
    if g.size == 0:
        raise ValueError("grid must be nonempty")
    key = {SweepAxis.SHELVE: "shelve", SweepAxis.DELAY: "delay", SweepAxis.IONIZE: "ionize"}[axis]
    q0 = spin.ms0_population(SpinState.MS0)
    q1 = spin.ms0_population(SpinState.MS1)
    resp = np.empty(g.size)
    err = np.empty(g.size)
    for k, d in enumerate(g):
        sp = mapping.spin_params(**{key: float(d)})
        durations = dict(shelve=mapping.shelve_anchor, delay=mapping.delay_anchor,
                         ionize=mapping.ionize_anchor)
        durations[key] = max(float(d), 1e-12)
        seq = scc_sequence(probe_power, probe_duration, **durations)
        if expected:
            a0, a1 = expected_scc_counts(ens, sp, seq, q0), expected_scc_counts(ens, sp, seq, q1)
            v0 = scc_count_variance(ens, sp, seq, q0) / shots
            v1 = scc_count_variance(ens, sp, seq, q1) / shots
        else:
            c0 = simulate_scc_shots(ens, sp, seq, shots, seed, ms0_population=q0,
                                    stream=(STREAM_SWEEP, 0), backend=backend)
            c1 = simulate_scc_shots(ens, sp, seq, shots, seed, ms0_population=q1,
                                    stream=(STREAM_SWEEP, 1), backend=backend)
            a0, a1 = c0.mean(), c1.mean()
            v0, v1 = c0.var(ddof=1) / shots, c1.var(ddof=1) / shots
        resp[k] = scc_contrast(a0, a1)
        # delta method on (a1 - a0) / a1
        err[k] = math.sqrt(v0 / a1 ** 2 + v1 * (a0 / a1 ** 2) ** 2) if a1 > 0 else math.inf
    err = np.where(err > 0, err, np.finfo(float).tiny)
    return SweepResult(f"{key}_duration", g, "s", resp, err, float(g[int(np.argmax(resp))]))


# -- PL readout ---------------------------------------------------------------------


def pl_readout_calibration(pl_model: PLReadoutModel, spin: SpinParams, power_grid, duration_grid,
                           shots: int, seed: int):
    """Monte Carlo PL spin contrast and SNR over (power, duration).

    Returns ``(contrast_sweep, snr_sweep)``, each a 2-D :class:`SweepResult`
    whose ``argmax`` is ``(power, duration)``.
    """
    p = np.asarray(power_grid, dtype=float).ravel()
    t = np.asarray(duration_grid, dtype=float).ravel()
    if p.size == 0 or t.size == 0:
        raise ValueError("grids must be nonempty")
    pol = spin.init_polarization
    rng = make_rng(seed, STREAM_SWEEP, 2)
    n0 = pl_model.counts(pol, p[:, None], t[None, :])
    n1 = pl_model.counts(1.0 - pol, p[:, None], t[None, :])
    m0 = rng.poisson(n0 * shots) / shots
    m1 = rng.poisson(n1 * shots) / shots
    with np.errstate(invalid="ignore", divide="ignore"):
        con = np.where(m0 > 0, (m0 - m1) / m0, 0.0)
        con_err = np.where(m0 > 0, np.sqrt(m1 / shots / m0 ** 2 + (m1 / m0 ** 2) ** 2 * m0 / shots), np.inf)
        snr = np.where(m0 + m1 > 0, (m0 - m1) / np.sqrt(m0 + m1), 0.0)
        snr_err = np.where(m0 + m1 > 0, np.sqrt(2.0 / shots), np.inf)

    def argmax(a):
        i, j = np.unravel_index(int(np.argmax(a)), a.shape)
        return (float(p[i]), float(t[j]))

    names, units = ("power", "duration"), ("mW", "s")
    return (SweepResult(names, (p, t), units, con, con_err, argmax(con), "contrast"),
            SweepResult(names, (p, t), units, snr, snr_err, argmax(snr), "snr"))


def saturation_measurement(pl_model: PLReadoutModel, powers, shots: int, seed: int,
                           duration: float = 10e-6) -> np.ndarray:
    """Background-subtracted PL rates (counts/s) of an m_s=0 spin at each power."""
    p = np.asarray(powers, dtype=float)
    rng = make_rng(seed, STREAM_SWEEP, 3)
    counts = rng.poisson(pl_model.counts(1.0, p, duration) * shots)
    return counts / (shots * duration) - pl_model.background


def noisy_saturation_data(pl_sat: float, i_sat: float, powers, rel_noise: float, seed: int):
    """Saturation law with multiplicative Gaussian noise, for recovery studies."""
    rng = make_rng(seed, STREAM_NOISE, 0)
    clean = fitting.saturation_curve(powers, pl_sat, i_sat)
    return clean * (1.0 + rel_noise * rng.standard_normal(np.shape(clean)))


# -- survey -------------------------------------------------------------------------


@dataclass(frozen=True)
class SurveyProtocol:
    """Trace acquisition and analysis settings of the survey pipeline."""

    probe_powers: tuple
    duration: float
    n_bins: int
    shots: int
    tau_grid: tuple
    n_max: int = 3
    weighted: bool = False


@dataclass(frozen=True)
class SurveyItem:
    index: int
    seed: int
    n_nv: int
    contrast_pct: float
    peak_snr: float
    peak_tau: float
    peak_power: float
    eta_c: float
    fom: tuple
    chosen_n: dict


@dataclass(frozen=True, eq=False)
class SurveyResult:
    items: tuple
    failures: tuple

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(it, name) for it in self.items], dtype=float)

    def stats(self, name: str) -> dict:
        v = self.values(name)
        if v.size == 0:
            return {"n": 0, "mean": math.nan, "std": math.nan, "min": math.nan, "max": math.nan}
        return {"n": int(v.size), "mean": float(v.mean()),
                "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                "min": float(v.min()), "max": float(v.max())}

    def fom_correlations(self) -> dict:
        """Pearson R of each FOM_i against peak SNR (NaN when undefined)."""
        snr = self.values("peak_snr")
        out = {}
        for i in range(3):
            f = np.array([it.fom[i] for it in self.items], dtype=float)
            ok = np.isfinite(f) & np.isfinite(snr)
            try:
                out[i + 1] = metrics.pearson(f[ok], snr[ok])
            except ValueError:
                out[i + 1] = math.nan
        return out


def item_seed(seed: int, index: int) -> int:
    """Per-item seed derived from a batch seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAM_SURVEY, int(index)))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def default_batch(template: EnsembleConfig, n_items: int, seed: int,
                  n_nv_range: tuple = (10, 15)) -> list:
    """``n_items`` nanodiamonds sharing ``template``'s distributions.

    Each item gets its own seed and an NV count drawn uniformly from
    ``n_nv_range`` (inclusive).
    """
    rng = make_rng(seed, STREAM_SURVEY, 0)
    lo, hi = n_nv_range
    counts = rng.integers(lo, hi + 1, n_items)
    return [replace(template, n_nv=int(counts[i]), seed=item_seed(seed, i)) for i in range(n_items)]


def analyse_nanodiamond(cfg: EnsembleConfig, protocol: SurveyProtocol, index: int = 0) -> SurveyItem:
    """simulate, fit, select and score one nanodiamond."""
    ens = cfg.sample()
    pairs = {}
    chosen = {}
    for pi, power in enumerate(protocol.probe_powers):
        fits = []
        for ki, pump in enumerate((Pump.PUMP_532, Pump.PUMP_592)):
            trace = simulate_charge_trace(ens, pump, power, protocol.duration, protocol.n_bins,
                                          protocol.shots, cfg.seed, stream=(ki, pi))
            sel = fitting.select_model(trace, protocol.n_max, weighted=protocol.weighted)
            chosen[f"{pump.value}@{power!r}"] = sel.chosen_n
            fits.append(sel.chosen)
        pairs[float(power)] = tuple(fits)
    rep = metrics.charge_readout_report(pairs, protocol.tau_grid)
    return SurveyItem(index, cfg.seed, cfg.n_nv, rep.contrast_pct, rep.peak.snr, rep.peak.tau,
                      rep.peak.power, rep.eta_c, rep.fom, chosen)


def survey(batch, protocol: SurveyProtocol) -> SurveyResult:
    """Full pipeline per nanodiamond; failures are quarantined, never fatal."""
    batch = list(batch)
    if not batch:
        raise ValueError("batch is empty")
    items, failures = [], []
    for i, cfg in enumerate(batch):
        try:
            items.append(analyse_nanodiamond(cfg, protocol, i))
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            failures.append((i, getattr(cfg, "seed", None), f"{type(exc).__name__}: {exc}"))
    return SurveyResult(tuple(items), tuple(failures))


def histogram_table(values, bins) -> list:
    """Rows of ``(bin_lo, bin_hi, count)``."""
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins)
    return [(float(edges[k]), float(edges[k + 1]), int(counts[k])) for k in range(counts.size)]
