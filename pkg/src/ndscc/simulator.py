"""Stochastic photophysics of NV ensembles in a nanodiamond.

Each NV is a two-state (NV-/NV0) system whose light-driven ionisation and
recombination rates have a linear (single-photon tunnelling) and a quadratic
(two-photon) power dependence.  Only NV- emission is detected.  Heterogeneity
across the NVs of one nanodiamond is what makes ensemble traces
multi-exponential.

Spin-to-charge conversion is a pair of instantaneous Bernoulli maps (shelving
into the singlet, then manifold-selective ionisation) followed by a charge
probe that evolves with the same rate model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import kernels
from ._random import RNG_ALGORITHM, STREAM_ENSEMBLE, STREAM_KMC, STREAM_SCC, STREAM_TRACE, make_rng
from .model import MultiExpModel, Pump, TimeSeriesTrace, evaluate, uniform_bins

# 1/(20 ns): spontaneous decay rate, equal to the excitation rate at saturation
DEFAULT_EXCITATION_SAT_RATE = 5.0e7
SCC_CHUNK = 8192
KMC_BUFFER_BYTES = 64 * 2**20


class SequenceError(ValueError):
    """Pulse sequence lacks a segment the protocol needs."""


@dataclass(frozen=True)
class NVParams:
    """Photophysical parameters of one NV (powers in mW, rates in 1/s)."""

    ion_lin: float
    ion_quad: float
    rec_lin: float
    rec_quad: float
    emission_coeff: float
    sat_power: float
    p_minus_init_532: float
    p_minus_init_592: float

    def __post_init__(self):
        for name in ("ion_lin", "ion_quad", "rec_lin", "rec_quad", "emission_coeff"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        if not (np.isfinite(self.sat_power) and self.sat_power > 0):
            raise ValueError("sat_power must be > 0")
        for name in ("p_minus_init_532", "p_minus_init_592"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")

    def is_nominal(self) -> bool:
        """True when both charge channels are active and 532 nm favours NV-."""
        return (
            (self.ion_lin > 0 or self.ion_quad > 0)
            and (self.rec_lin > 0 or self.rec_quad > 0)
            and self.p_minus_init_532 > self.p_minus_init_592
        )

    def ionization_rate(self, power):
        return self.ion_lin * power + self.ion_quad * power ** 2

    def recombination_rate(self, power):
        return self.rec_lin * power + self.rec_quad * power ** 2

    def emission_rate(self, power):
        """Detected NV- PL rate, ``emission_coeff * P / (1 + P / sat_power)``."""
        return self.emission_coeff * power / (1.0 + power / self.sat_power)


NV_FIELDS = tuple(f.name for f in fields(NVParams))


@dataclass(frozen=True)
class LogNormal:
    """Log-normal spread given by its median and geometric standard deviation."""

    median: float
    gsd: float = 1.0

    def __post_init__(self):
        if not self.median >= 0:
            raise ValueError("median must be >= 0")
        if not self.gsd >= 1.0:
            raise ValueError("geometric sigma must be >= 1")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal(n)
        return self.median * np.exp(np.log(self.gsd) * z)


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Struct-of-arrays view of the NVs of one nanodiamond."""

    ion_lin: np.ndarray
    ion_quad: np.ndarray
    rec_lin: np.ndarray
    rec_quad: np.ndarray
    emission_coeff: np.ndarray
    sat_power: np.ndarray
    p_minus_init_532: np.ndarray
    p_minus_init_592: np.ndarray
    dark_recombination: float = 0.0
    excitation_sat_rate: float = DEFAULT_EXCITATION_SAT_RATE

    def __post_init__(self):
        n = None
        for name in NV_FIELDS:
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise ValueError("all NV parameter arrays must have equal length")
            object.__setattr__(self, name, arr)
        if n == 0:
            raise ValueError("ensemble is empty")
        if self.dark_recombination < 0:
            raise ValueError("dark_recombination must be >= 0")
        # validates every NV
        for i in range(n):
            self.nv(i)

    @classmethod
    def from_nvs(cls, nvs, dark_recombination=0.0,
                 excitation_sat_rate=DEFAULT_EXCITATION_SAT_RATE) -> "Ensemble":
        nvs = list(nvs)
        if not nvs:
            raise ValueError("ensemble is empty")
        cols = {name: [getattr(nv, name) for nv in nvs] for name in NV_FIELDS}
        return cls(**cols, dark_recombination=dark_recombination,
                   excitation_sat_rate=excitation_sat_rate)

    @property
    def n_nv(self) -> int:
        return self.ion_lin.size

    def nv(self, i: int) -> NVParams:
        return NVParams(**{name: float(getattr(self, name)[i]) for name in NV_FIELDS})

    def nvs(self) -> list[NVParams]:
        return [self.nv(i) for i in range(self.n_nv)]

    def ionization_rate(self, power):
        return self.ion_lin * power + self.ion_quad * power ** 2

    def recombination_rate(self, power):
        r = self.rec_lin * power + self.rec_quad * power ** 2
        return r + self.dark_recombination

    def relaxation_rate(self, power):
        return self.ionization_rate(power) + self.recombination_rate(power)

    def steady_state(self, power):
        g = self.ionization_rate(power)
        r = self.recombination_rate(power)
        k = g + r
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(k > 0, r / np.where(k > 0, k, 1.0), np.nan)

    def emission_rate(self, power):
        return self.emission_coeff * power / (1.0 + power / self.sat_power)

    def p_init(self, pump: Pump) -> np.ndarray:
        pump = Pump(pump)
        return self.p_minus_init_532 if pump is Pump.PUMP_532 else self.p_minus_init_592


@dataclass(frozen=True)
class EnsembleConfig:
    """Recipe for sampling a synthetic nanodiamond.

    ``distributions`` maps each :class:`NVParams` field to a :class:`LogNormal`.
    Sampled initial-charge probabilities are clipped to [0, 1] and the 592 nm
    value is kept strictly below the 532 nm value of the same NV.
    """

    n_nv: int
    distributions: dict
    seed: int
    dark_recombination: float = 0.0
    excitation_sat_rate: float = DEFAULT_EXCITATION_SAT_RATE

    def __post_init__(self):
        if int(self.n_nv) != self.n_nv or self.n_nv < 1:
            raise ValueError("n_nv must be a positive integer")
        missing = [name for name in NV_FIELDS if name not in self.distributions]
        if missing:
            raise ValueError(f"missing distributions for {missing}")
        dists = {}
        for name in NV_FIELDS:
            d = self.distributions[name]
            if not isinstance(d, LogNormal):
                d = LogNormal(**d) if isinstance(d, dict) else LogNormal(*d)
            dists[name] = d
        object.__setattr__(self, "distributions", dists)
        if self.dark_recombination < 0:
            raise ValueError("dark_recombination must be >= 0")

    def with_seed(self, seed: int) -> "EnsembleConfig":
        return replace(self, seed=int(seed))

    def sample(self) -> Ensemble:
        rng = make_rng(self.seed, STREAM_ENSEMBLE)
        cols = {name: self.distributions[name].sample(rng, self.n_nv) for name in NV_FIELDS}
        p532 = np.clip(cols["p_minus_init_532"], 0.0, 1.0)
        p592 = np.clip(cols["p_minus_init_592"], 0.0, 1.0)
        cols["p_minus_init_532"] = p532
        cols["p_minus_init_592"] = np.minimum(p592, np.nextafter(p532, 0.0))
        return Ensemble(**cols, dark_recombination=self.dark_recombination,
                        excitation_sat_rate=self.excitation_sat_rate)


def as_ensemble(ensemble) -> Ensemble:
    if isinstance(ensemble, Ensemble):
        return ensemble
    if isinstance(ensemble, EnsembleConfig):
        return ensemble.sample()
    if isinstance(ensemble, NVParams):
        return Ensemble.from_nvs([ensemble])
    return Ensemble.from_nvs(ensemble)


def _relax(p0, p_ss, k, t):
    """p_ss + (p0 - p_ss) exp(-k t), frozen at p0 where k == 0."""
    k = np.asarray(k, dtype=float)
    safe_ss = np.where(k > 0, p_ss, p0)
    return safe_ss + (p0 - safe_ss) * np.exp(-k * t)


def analytic_population(nv: NVParams, probe_power, p_minus_0, t, dark_recombination=0.0):
    """NV- probability after probing for ``t`` seconds at ``probe_power`` mW.

    With g and r the ionisation and recombination rates the result is
    ``p_ss + (p0 - p_ss) exp(-(g + r) t)``.  Without light (and with dark
    recombination disabled) the population is frozen at ``p0``.
    """
    if np.any(np.asarray(probe_power) < 0):
        raise ValueError("probe_power must be >= 0")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    if not 0.0 <= p_minus_0 <= 1.0:
        raise ValueError("p_minus_0 must lie in [0, 1]")
    g = nv.ionization_rate(probe_power)
    r = nv.recombination_rate(probe_power) + dark_recombination
    k = g + r
    p_ss = r / k if k > 0 else p_minus_0
    out = np.clip(_relax(p_minus_0, p_ss, k, t), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def ensemble_populations(ens: Ensemble, probe_power: float, p0, t) -> np.ndarray:
    """NV- probabilities, shape (n_nv, len(t))."""
    k = ens.relaxation_rate(probe_power)[:, None]
    p_ss = ens.steady_state(probe_power)[:, None]
    p0 = np.broadcast_to(np.asarray(p0, dtype=float), (ens.n_nv,))[:, None]
    return np.clip(_relax(p0, p_ss, k, np.asarray(t, dtype=float)[None, :]), 0.0, 1.0)


def expected_charge_rate(ens: Ensemble, pump: Pump, probe_power: float, t) -> np.ndarray:
    """Expected detected PL rate (counts/s) of the ensemble at probe times ``t``."""
    pops = ensemble_populations(ens, probe_power, ens.p_init(pump), t)
    return ens.emission_rate(probe_power) @ pops


def expected_charge_model(ens: Ensemble, pump: Pump, probe_power: float) -> MultiExpModel:
    """Exact expected PL curve as a multi-exponential with one term per distinct rate."""
    e = ens.emission_rate(probe_power)
    k = ens.relaxation_rate(probe_power)
    p0 = ens.p_init(pump)
    p_ss = np.where(k > 0, ens.steady_state(probe_power), p0)
    c0 = float(np.sum(e * p_ss))
    merged: list[list[float]] = []
    for g, a in sorted(zip(k[k > 0], (e * (p0 - p_ss))[k > 0]), reverse=True):
        if merged and merged[-1][0] - g <= 1e-6 * merged[-1][0]:
            merged[-1][1] += a
        else:
            merged.append([g, a])
    return MultiExpModel(max(c0, 0.0), tuple((a, g) for g, a in merged))


def _poisson_counts(rng, mean):
    mean = np.asarray(mean, dtype=float)
    if not np.all(np.isfinite(mean)):
        raise ValueError("non-finite expected rate")
    return rng.poisson(mean)


def simulate_charge_trace(ensemble, pump_label, probe_power: float, duration: float,
                          n_bins: int, shots: int, seed: int, stream=0) -> TimeSeriesTrace:
    """Poisson photon-count trace of one pump/probe condition.

    The expected rate is evaluated at each bin start and multiplied by the bin
    width and the shot count to give the Poisson mean of the bin.
    """
    ens = as_ensemble(ensemble)
    if not duration > 0:
        raise ValueError("duration must be > 0")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if probe_power < 0:
        raise ValueError("probe_power must be >= 0")
    starts, width = uniform_bins(duration, n_bins)
    rate = expected_charge_rate(ens, pump_label, probe_power, starts)
    stream = (stream,) if np.isscalar(stream) else tuple(stream)
    rng = make_rng(seed, STREAM_TRACE, *stream)
    counts = _poisson_counts(rng, rate * width * shots)
    meta = {"rng": RNG_ALGORITHM, "seed": int(seed), "stream": [int(k) for k in stream]}
    return TimeSeriesTrace(starts, width, counts, shots, Pump(pump_label), probe_power, meta)


def simulate_model_trace(model: MultiExpModel, duration: float, n_bins: int, shots: int,
                         seed: int | None = None, pump_label=Pump.PUMP_532,
                         probe_power: float = 0.0, noiseless: bool = False,
                         stream: int = 0) -> TimeSeriesTrace:
    """Trace whose bin means come straight from a :class:`MultiExpModel`.

    ``noiseless=True`` rounds the expected counts instead of drawing them; use
    a large ``shots`` so rounding is negligible.
    """
    starts, width = uniform_bins(duration, n_bins)
    with np.errstate(over="ignore"):
        mean = evaluate(model, starts) * width * shots
    if noiseless:
        if not np.all(np.isfinite(mean)):
            raise ValueError("non-finite expected rate")
        counts = np.rint(mean).astype(np.int64)
        meta = {"noiseless": True}
    else:
        rng = make_rng(seed, STREAM_TRACE, stream)
        counts = _poisson_counts(rng, mean)
        meta = {"rng": RNG_ALGORITHM, "seed": int(seed), "stream": int(stream)}
    return TimeSeriesTrace(starts, width, counts, shots, pump_label, probe_power, meta)


# -- spin ---------------------------------------------------------------------------


class SpinState(str, enum.Enum):
    MS0 = "MS0"
    MS1 = "MS1"


@dataclass(frozen=True)
class SpinParams:
    """Spin relaxation and SCC conversion probabilities (times in s)."""

    t1: float
    t1_mw: float
    p_shelf_ms1: float
    p_shelf_ms0: float
    p_ionize_triplet: float
    p_ionize_singlet: float
    init_polarization: float

    def __post_init__(self):
        if not (self.t1 > 0 and self.t1_mw > 0):
            raise ValueError("relaxation times must be > 0")
        for name in ("p_shelf_ms1", "p_shelf_ms0", "p_ionize_triplet", "p_ionize_singlet",
                     "init_polarization"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")

    def is_nominal(self) -> bool:
        return (self.p_shelf_ms1 > self.p_shelf_ms0
                and self.p_ionize_triplet > self.p_ionize_singlet
                and self.t1_mw < self.t1)

    def ms0_population(self, state: SpinState) -> float:
        """m_s=0 population right after preparing ``state``."""
        state = SpinState(state)
        if state is SpinState.MS0:
            return self.init_polarization
        return 1.0 - self.init_polarization

    def survival(self, ms0: bool) -> float:
        """Probability that an NV- with the given spin stays NV- through SCC."""
        p_shelf = self.p_shelf_ms0 if ms0 else self.p_shelf_ms1
        p_ion = p_shelf * self.p_ionize_singlet + (1.0 - p_shelf) * self.p_ionize_triplet
        return 1.0 - p_ion


def evolve_spin(spin: SpinParams, polarization_0, tau_w, mw_on: bool):
    """m_s=0 population after waiting ``tau_w``; relaxes toward 1/3."""
    tau_w = np.asarray(tau_w, dtype=float)
    if np.any(tau_w < 0):
        raise ValueError("tau_w must be >= 0")
    t1 = spin.t1_mw if mw_on else spin.t1
    out = 1.0 / 3.0 + (polarization_0 - 1.0 / 3.0) * np.exp(-tau_w / t1)
    return float(out) if out.ndim == 0 else out


# -- pulse sequences ----------------------------------------------------------------

PULSE_ROLES = ("init", "wait", "shelve", "delay", "ionize", "probe")


@dataclass(frozen=True)
class Pulse:
    role: str
    wavelength: int | None
    power: float
    duration: float
    detect: bool = False

    def __post_init__(self):
        if self.role not in PULSE_ROLES:
            raise ValueError(f"unknown pulse role {self.role!r}")
        if self.wavelength not in (None, 532, 592):
            raise ValueError("wavelength must be 532, 592 or None (dark)")
        if not self.duration > 0:
            raise ValueError("pulse durations must be > 0")
        if self.power < 0:
            raise ValueError("pulse power must be >= 0")


@dataclass(frozen=True)
class PulseSequence:
    pulses: tuple
    repetitions: int = 1

    def __post_init__(self):
        pulses = tuple(p if isinstance(p, Pulse) else Pulse(**p) for p in self.pulses)
        if sum(p.detect for p in pulses) > 1:
            raise ValueError("at most one detect-flagged segment per repetition")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        object.__setattr__(self, "pulses", pulses)

    def find(self, role: str) -> Pulse | None:
        for p in self.pulses:
            if p.role == role:
                return p
        return None

    @property
    def probe(self) -> Pulse | None:
        for p in self.pulses:
            if p.detect:
                return p
        return None

    @property
    def cycle_time(self) -> float:
        return float(sum(p.duration for p in self.pulses))

    def validate_scc(self) -> None:
        missing = [r for r in ("shelve", "ionize") if self.find(r) is None]
        if self.probe is None:
            missing.append("detect-flagged probe")
        if missing:
            raise SequenceError(f"SCC sequence is missing: {', '.join(missing)}")

    def with_probe(self, power: float, duration: float) -> "PulseSequence":
        pulses = tuple(replace(p, power=power, duration=duration) if p.detect else p
                       for p in self.pulses)
        return replace(self, pulses=pulses)


def scc_sequence(probe_power: float, probe_duration: float, tau_w: float = 0.0,
                 init_duration: float = 5e-6, shelve: float = 15e-9, delay: float = 25e-9,
                 ionize: float = 50e-9, scc_power: float = 30.0,
                 init_power: float = 1.0) -> PulseSequence:
    """532 nm init, optional wait, 592 nm shelve/delay/ionise, then a 592 nm probe."""
    pulses = [Pulse("init", 532, init_power, init_duration)]
    if tau_w > 0:
        pulses.append(Pulse("wait", None, 0.0, tau_w))
    pulses += [
        Pulse("shelve", 592, scc_power, shelve),
        Pulse("delay", None, 0.0, delay),
        Pulse("ionize", 592, scc_power, ionize),
        Pulse("probe", 592, probe_power, probe_duration, detect=True),
    ]
    return PulseSequence(tuple(pulses))


# -- SCC shots ----------------------------------------------------------------------


def probe_state_counts(ens: Ensemble, probe_power: float, duration: float):
    """Expected probe counts per NV when starting in NV- and in NV0.

    Returns ``(a_minus, a_zero)``, each of shape (n_nv,).
    """
    e = ens.emission_rate(probe_power)
    k = ens.relaxation_rate(probe_power)
    p_ss = ens.steady_state(probe_power)
    safe_k = np.where(k > 0, k, 1.0)
    frac = np.where(k > 0, -np.expm1(-k * duration) / safe_k, duration)
    base = np.where(k > 0, p_ss * duration, 0.0)
    p_ss0 = np.where(k > 0, p_ss, 0.0)
    a_minus = e * (base + (1.0 - p_ss0) * frac)
    a_zero = e * (base - p_ss0 * frac)
    return a_minus, np.maximum(a_zero, 0.0)


def _init_p_minus(ens: Ensemble, pulses: PulseSequence) -> np.ndarray:
    init = pulses.find("init")
    if init is not None and init.wavelength == 592:
        return ens.p_minus_init_592
    return ens.p_minus_init_532


def post_scc_minus_probability(ens: Ensemble, spin: SpinParams, p_pre, q: float) -> np.ndarray:
    """Per-NV NV- probability after the SCC maps for m_s=0 population ``q``."""
    return np.asarray(p_pre) * (q * spin.survival(True) + (1.0 - q) * spin.survival(False))


def expected_scc_counts(ensemble, spin: SpinParams, pulses: PulseSequence, q: float) -> float:
    """Mean probe counts per shot, from closed-form populations."""
    ens = as_ensemble(ensemble)
    pulses.validate_scc()
    probe = pulses.probe
    a_minus, a_zero = probe_state_counts(ens, probe.power, probe.duration)
    s = post_scc_minus_probability(ens, spin, _init_p_minus(ens, pulses), q)
    return float(np.sum(a_zero + (a_minus - a_zero) * s))


def scc_count_variance(ensemble, spin: SpinParams, pulses: PulseSequence, q: float) -> float:
    """Per-shot count variance: Poisson part plus binomial charge-conversion part.

    Treats each NV's final charge as a single Bernoulli draw, which neglects the
    correlation that a shared spin state would induce (spins are drawn per NV).
    """
    ens = as_ensemble(ensemble)
    probe = pulses.probe
    a_minus, a_zero = probe_state_counts(ens, probe.power, probe.duration)
    s = post_scc_minus_probability(ens, spin, _init_p_minus(ens, pulses), q)
    mean = np.sum(a_zero + (a_minus - a_zero) * s)
    return float(mean + np.sum((a_minus - a_zero) ** 2 * s * (1.0 - s)))


def simulate_scc_shots(ensemble, spin: SpinParams, pulses: PulseSequence, n_shots: int,
                       seed: int, ms_state: SpinState | None = None,
                       ms0_population: float | None = None, stream=(),
                       backend: str | None = None) -> np.ndarray:
    """Detected probe counts of ``n_shots`` independent SCC shots.

    Per NV and shot: the pre-conversion charge, the spin, the shelving and the
    ionisation are Bernoulli draws; the probe count is Poisson with the mean
    implied by each NV's final charge.  Give either ``ms_state`` (pure
    preparation) or ``ms0_population`` (mixed state, e.g. after relaxation).
    """
    ens = as_ensemble(ensemble)
    pulses.validate_scc()
    if ms0_population is None:
        if ms_state is None:
            raise ValueError("give ms_state or ms0_population")
        ms0_population = spin.ms0_population(ms_state)
    q = float(ms0_population)
    if not 0.0 <= q <= 1.0:
        raise ValueError("ms0_population must lie in [0, 1]")
    n_shots = int(n_shots)
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    probe = pulses.probe
    a_minus, a_zero = probe_state_counts(ens, probe.power, probe.duration)
    if not (np.all(np.isfinite(a_minus)) and np.all(np.isfinite(a_zero))):
        raise ValueError("non-finite expected probe counts")
    p_pre = _init_p_minus(ens, pulses)
    stream = (stream,) if np.isscalar(stream) else tuple(stream)
    rng = make_rng(seed, STREAM_SCC, *stream)
    out = np.empty(n_shots, dtype=np.int64)
    for lo in range(0, n_shots, SCC_CHUNK):
        m = min(SCC_CHUNK, n_shots - lo)
        u = rng.random((m, ens.n_nv, kernels.SCC_UNIFORMS))
        means = kernels.scc_probe_means(
            u, p_pre, q, spin.p_shelf_ms0, spin.p_shelf_ms1, spin.p_ionize_singlet,
            spin.p_ionize_triplet, a_minus, a_zero, backend=backend,
        )
        out[lo:lo + m] = rng.poisson(means)
    return out


def simulate_scc_shot(ensemble, spin: SpinParams, pulses: PulseSequence, ms_state: SpinState,
                      seed: int, stream=()) -> int:
    """Detected photon count of a single SCC shot."""
    return int(simulate_scc_shots(ensemble, spin, pulses, 1, seed, ms_state=ms_state,
                                  stream=stream)[0])


# -- event-level Monte Carlo --------------------------------------------------------


@dataclass(frozen=True)
class KMCResult:
    power: float
    duration: float
    n_traj: int
    hist: np.ndarray
    cycles: int
    lin_ion: int
    quad_ion: int
    lin_rec: int
    quad_rec: int
    detected: int
    overflow: int
    time_minus: float
    time_zero: float
    extra: dict = field(default_factory=dict)

    @property
    def linear_events(self) -> int:
        return self.lin_ion + self.lin_rec

    @property
    def tunneling_fraction(self) -> float:
        """Fraction of excitation cycles that ended in a linear-channel event."""
        return self.linear_events / self.cycles if self.cycles else float("nan")

    @property
    def tunneling_fraction_stderr(self) -> float:
        f = self.tunneling_fraction
        return math.sqrt(f * (1.0 - f) / self.cycles) if self.cycles else float("nan")

    @property
    def ionization_rate(self) -> float:
        return (self.lin_ion + self.quad_ion) / self.time_minus

    @property
    def recombination_rate(self) -> float:
        return (self.lin_rec + self.quad_rec) / self.time_zero


def kmc_rates(nv: NVParams, power: float, excitation_sat_rate=DEFAULT_EXCITATION_SAT_RATE):
    """Event rates of the cycle-level chain.

    The excitation rate saturates as ``Gamma P / (P + P_sat)``; the detection
    probability per radiative cycle is chosen so the detected rate equals
    :meth:`NVParams.emission_rate` exactly.
    """
    cycle = excitation_sat_rate * power / (power + nv.sat_power)
    eta = nv.emission_coeff * nv.sat_power / excitation_sat_rate
    if eta > 1.0:
        raise ValueError("emission_coeff implies a detection efficiency above 1")
    return dict(
        k_rad_det=cycle * eta,
        k_rad_undet=cycle * (1.0 - eta),
        k_lin_ion=nv.ion_lin * power,
        k_quad_ion=nv.ion_quad * power ** 2,
        k_cyc_zero=cycle,
        k_lin_rec=nv.rec_lin * power,
        k_quad_rec=nv.rec_quad * power ** 2,
    )


def expected_tunneling_fraction(nv: NVParams, power: float,
                                excitation_sat_rate=DEFAULT_EXCITATION_SAT_RATE) -> float:
    """Steady-state fraction of cycles ending in a linear-channel event."""
    k = kmc_rates(nv, power, excitation_sat_rate)
    g = nv.ionization_rate(power)
    r = nv.recombination_rate(power)
    pm = r / (g + r)
    rate_m = k["k_rad_det"] + k["k_rad_undet"] + k["k_lin_ion"] + k["k_quad_ion"]
    rate_0 = k["k_cyc_zero"] + k["k_lin_rec"] + k["k_quad_rec"]
    lin = pm * k["k_lin_ion"] + (1 - pm) * k["k_lin_rec"]
    return lin / (pm * rate_m + (1 - pm) * rate_0)


def simulate_kmc(nv: NVParams, power: float, duration: float, n_traj: int, seed: int,
                 n_bins: int = 1, p_minus_0: float | None = None, stream=(),
                 excitation_sat_rate=DEFAULT_EXCITATION_SAT_RATE,
                 backend: str | None = None) -> KMCResult:
    """Event-by-event Monte Carlo of ``n_traj`` independent probe trajectories.

    ``p_minus_0`` defaults to the steady-state probability at ``power``.
    """
    if not (duration > 0 and power >= 0 and n_traj >= 1):
        raise ValueError("need duration > 0, power >= 0, n_traj >= 1")
    rates = kmc_rates(nv, power, excitation_sat_rate)
    if p_minus_0 is None:
        g, r = nv.ionization_rate(power), nv.recombination_rate(power)
        p_minus_0 = r / (g + r) if g + r > 0 else 1.0
    r_max = max(rates["k_rad_det"] + rates["k_rad_undet"] + rates["k_lin_ion"] + rates["k_quad_ion"],
                rates["k_cyc_zero"] + rates["k_lin_rec"] + rates["k_quad_rec"])
    mean_events = r_max * duration
    max_events = int(mean_events + 8.0 * math.sqrt(mean_events) + 32)
    chunk = max(1, KMC_BUFFER_BYTES // (16 * max_events))
    stream = (stream,) if np.isscalar(stream) else tuple(stream)
    rng = make_rng(seed, STREAM_KMC, *stream)
    hist = np.zeros(n_bins, dtype=np.int64)
    tally = np.zeros(kernels.N_TALLY, dtype=np.int64)
    occupancy = np.zeros(2)
    for lo in range(0, n_traj, chunk):
        m = min(chunk, n_traj - lo)
        init = rng.random(m) < p_minus_0
        u = rng.random((m, max_events, 2))
        h, t, o = kernels.kmc_charge(u, init, duration=duration, n_bins=n_bins,
                                     backend=backend, **rates)
        hist += h
        tally += t
        occupancy += o
    return KMCResult(
        power=power, duration=duration, n_traj=n_traj, hist=hist,
        cycles=int(tally[kernels.T_CYCLES]), lin_ion=int(tally[kernels.T_LIN_ION]),
        quad_ion=int(tally[kernels.T_QUAD_ION]), lin_rec=int(tally[kernels.T_LIN_REC]),
        quad_rec=int(tally[kernels.T_QUAD_REC]), detected=int(tally[kernels.T_DETECTED]),
        overflow=int(tally[kernels.T_OVERFLOW]), time_minus=float(occupancy[0]),
        time_zero=float(occupancy[1]), extra={"rng": RNG_ALGORITHM, "seed": int(seed)},
    )


def power_scaling_fit(nv: NVParams, powers, events_per_power: int, seed: int,
                      excitation_sat_rate=DEFAULT_EXCITATION_SAT_RATE, backend=None):
    """Regress Monte Carlo charge-cycling rates on {P, P^2} without intercept.

    For each power the ionisation and recombination rates are estimated as
    event counts over time spent in the source state; ``events_per_power`` is
    the target number of charge flips per power.

    Returns a dict with the measured rates and the fitted linear and quadratic
    coefficients of the ionisation, recombination and total (g + r) rates.
    """
    powers = np.asarray(powers, dtype=float)
    g_hat, r_hat = [], []
    for idx, p in enumerate(powers):
        g, r = nv.ionization_rate(p), nv.recombination_rate(p)
        # steady-state flip rate; each trajectory covers about 200 flips
        flip_rate = 2.0 * g * r / (g + r)
        duration = 200.0 / flip_rate
        n_traj = max(1, int(math.ceil(events_per_power / 200.0)))
        res = simulate_kmc(nv, p, duration, n_traj, seed, stream=(idx,),
                           excitation_sat_rate=excitation_sat_rate, backend=backend)
        if res.overflow:
            raise RuntimeError("event buffer exhausted")
        g_hat.append(res.ionization_rate)
        r_hat.append(res.recombination_rate)
    g_hat, r_hat = np.array(g_hat), np.array(r_hat)
    design = np.column_stack([powers, powers ** 2])

    def regress(y):
        # relative weighting: each rate has ~1/sqrt(N) relative error
        w = 1.0 / y
        coef, *_ = np.linalg.lstsq(design * w[:, None], y * w, rcond=None)
        return coef

    return {
        "powers": powers,
        "ionization_rate": g_hat,
        "recombination_rate": r_hat,
        "ionization_coeffs": regress(g_hat),
        "recombination_coeffs": regress(r_hat),
        "total_coeffs": regress(g_hat + r_hat),
    }


# -- conventional PL spin readout ---------------------------------------------------


@dataclass(frozen=True)
class PLReadoutModel:
    """Spin-dependent PL under 532 nm readout.

    The detected rate saturates as ``pl_sat / (1 + i_sat / P)``.  An m_s=+-1
    population emits less by a fraction ``contrast(P)`` that decays with the
    repolarisation time ``t_pol(P) = t_pol_sat (1 + i_sat / P)``.  The contrast
    rolls off as ``contrast_0 / (1 + P / contrast_roll_power)``, which models
    the extra charge cycling at high power.  ``background`` is a constant
    count rate (counts/s).
    """

    pl_sat: float
    i_sat: float
    contrast_0: float
    contrast_roll_power: float
    t_pol_sat: float
    background: float = 0.0

    def __post_init__(self):
        if not (self.pl_sat >= 0 and self.i_sat > 0 and self.t_pol_sat > 0
                and self.contrast_roll_power > 0 and self.background >= 0):
            raise ValueError("invalid PL readout parameters")
        if not 0.0 <= self.contrast_0 <= 1.0:
            raise ValueError("contrast_0 must lie in [0, 1]")

    def rate(self, power):
        power = np.asarray(power, dtype=float)
        return self.pl_sat * power / (power + self.i_sat)

    def contrast(self, power):
        return self.contrast_0 / (1.0 + np.asarray(power, dtype=float) / self.contrast_roll_power)

    def t_pol(self, power):
        return self.t_pol_sat * (1.0 + self.i_sat / np.asarray(power, dtype=float))

    def counts(self, q, power, duration):
        """Expected counts per readout for m_s=0 population ``q``."""
        if np.any(np.asarray(power) <= 0) or np.any(np.asarray(duration) <= 0):
            raise ValueError("power and duration must be > 0")
        tp = self.t_pol(power)
        deficit = self.contrast(power) * (1.0 - q) * tp * -np.expm1(-duration / tp)
        return self.rate(power) * (duration - deficit) + self.background * duration

    def spin_snr(self, power, duration, polarization: float) -> np.ndarray:
        """``(N(pol) - N(1 - pol)) / sqrt(N(pol) + N(1 - pol))`` for pure preparations."""
        n0 = self.counts(polarization, power, duration)
        n1 = self.counts(1.0 - polarization, power, duration)
        return (n0 - n1) / np.sqrt(n0 + n1)
