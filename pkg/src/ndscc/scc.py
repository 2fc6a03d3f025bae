"""Spin-readout sensitivity and SCC-over-PL speedup.

The single-shot spin SNR surface over (probe power, probe duration) is either
simulated or loaded from a table.  The SCC sensitivity at a wait time ``tau_w``
is the best (lowest) value of ``sqrt(tau_i + tau_w + tau_r) / SNR`` over the
surface; the PL baseline keeps its readout fixed.  The speedup is the squared
ratio of the two sensitivities.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .model import DomainError
from .simulator import (PulseSequence, SpinParams, SpinState, as_ensemble,
                        expected_scc_counts, scc_count_variance, simulate_scc_shots)

DEFAULT_TAU_I = 5e-6
DEFAULT_TAU_R_PL = 300e-9


class SurfaceSource(str, enum.Enum):
    SIMULATED = "SIMULATED"
    MEASURED_FILE = "MEASURED_FILE"
    EXPECTED = "EXPECTED"


@dataclass(frozen=True, eq=False)
class SensitivitySurface:
    """Single-shot spin SNR on a (power row, duration column) grid."""

    power_grid: np.ndarray
    tau_grid: np.ndarray
    snr: np.ndarray
    tau_i: float = DEFAULT_TAU_I
    source: SurfaceSource = SurfaceSource.SIMULATED
    snr_se: np.ndarray | None = None

    def __post_init__(self):
        p = np.array(self.power_grid, dtype=float).ravel()
        t = np.array(self.tau_grid, dtype=float).ravel()
        s = np.array(self.snr, dtype=float).reshape(p.size, t.size)
        for name, g in (("power_grid", p), ("tau_grid", t)):
            if g.size == 0 or np.any(g <= 0) or np.any(np.diff(g) <= 0):
                raise ValueError(f"{name} must be nonempty, positive and strictly ascending")
        if not np.all(np.isfinite(s)):
            raise ValueError("SNR values must be finite")
        if self.tau_i < 0:
            raise ValueError("tau_i must be >= 0")
        for name, arr in (("power_grid", p), ("tau_grid", t), ("snr", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.snr_se is not None:
            se = np.array(self.snr_se, dtype=float).reshape(s.shape)
            se.setflags(write=False)
            object.__setattr__(self, "snr_se", se)
        object.__setattr__(self, "source", SurfaceSource(self.source))
        object.__setattr__(self, "tau_i", float(self.tau_i))

    @property
    def best_snr(self) -> float:
        return float(self.snr.max())

    def same_as(self, other: "SensitivitySurface") -> bool:
        return (np.array_equal(self.power_grid, other.power_grid)
                and np.array_equal(self.tau_grid, other.tau_grid)
                and np.array_equal(self.snr, other.snr)
                and self.tau_i == other.tau_i and self.source == other.source)


@dataclass(frozen=True)
class SCCOptimum:
    """Optimal SCC sensitivity at one wait time.

    ``tau_r`` and ``power`` are the optimal grid cell; ``tau_r_refined`` is the
    golden-section refinement inside the neighbouring duration cells.
    """

    eta: float
    tau_r: float
    power: float
    eta_grid: float
    tau_r_refined: float


@dataclass(frozen=True, eq=False)
class SpeedupCurve:
    tau_w_grid: np.ndarray
    f_values: np.ndarray
    break_even: float | None
    asymptote: float | None


def spin_snr(alpha_0, alpha_1):
    """``|alpha_0 - alpha_1| / sqrt(alpha_0 + alpha_1)``; 0 when no counts.

    The magnitude is used because under SCC the m_s=+-1 preparation is the
    brighter one.
    """
    a0 = np.asarray(alpha_0, dtype=float)
    a1 = np.asarray(alpha_1, dtype=float)
    tot = a0 + a1
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(tot > 0, np.abs(a0 - a1) / np.sqrt(np.where(tot > 0, tot, 1.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def _check_grids(power_grid, tau_grid):
    p = np.asarray(power_grid, dtype=float).ravel()
    t = np.asarray(tau_grid, dtype=float).ravel()
    if p.size == 0 or t.size == 0:
        raise ValueError("grids must be nonempty")
    return p, t


def spin_snr_surface_from_sim(ensemble, spin: SpinParams, pulse_template: PulseSequence,
                              power_grid, tau_grid, shots_per_point: int, seed: int,
                              threads: int = 1, backend: str | None = None,
                              tau_i: float | None = None) -> SensitivitySurface:
    """Monte Carlo spin SNR surface.

    Every cell runs ``shots_per_point`` shots per spin preparation on its own
    random stream ``(row, column, state)``, so results do not depend on
    ``threads``.
    """
    ens = as_ensemble(ensemble)
    p, t = _check_grids(power_grid, tau_grid)
    if shots_per_point < 1000:
        raise ValueError("shots_per_point must be >= 1000")
    pulse_template.validate_scc()
    if tau_i is None:
        init = pulse_template.find("init")
        tau_i = init.duration if init is not None else DEFAULT_TAU_I

    def cell(ij):
        i, j = ij
        seq = pulse_template.with_probe(p[i], t[j])
        try:
            c0 = simulate_scc_shots(ens, spin, seq, shots_per_point, seed, ms_state=SpinState.MS0,
                                    stream=(i, j, 0), backend=backend)
            c1 = simulate_scc_shots(ens, spin, seq, shots_per_point, seed, ms_state=SpinState.MS1,
                                    stream=(i, j, 1), backend=backend)
        except ValueError as exc:
            raise ValueError(f"grid point power={p[i]!r} mW, tau={t[j]!r} s: {exc}") from exc
        a0, a1 = c0.mean(), c1.mean()
        snr = spin_snr(a0, a1)
        tot = a0 + a1
        se = math.sqrt((c0.var() + c1.var()) / shots_per_point / tot) if tot > 0 else 0.0
        return snr, se

    cells = [(i, j) for i in range(p.size) for j in range(t.size)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(cell, cells))
    else:
        out = [cell(c) for c in cells]
    snr = np.array([o[0] for o in out]).reshape(p.size, t.size)
    se = np.array([o[1] for o in out]).reshape(p.size, t.size)
    return SensitivitySurface(p, t, snr, tau_i, SurfaceSource.SIMULATED, se)


def spin_snr_surface_expected(ensemble, spin: SpinParams, pulse_template: PulseSequence,
                              power_grid, tau_grid, tau_i: float | None = None) -> SensitivitySurface:
    """Semi-analytic surface from expected counts (no Monte Carlo noise)."""
    ens = as_ensemble(ensemble)
    p, t = _check_grids(power_grid, tau_grid)
    pulse_template.validate_scc()
    if tau_i is None:
        init = pulse_template.find("init")
        tau_i = init.duration if init is not None else DEFAULT_TAU_I
    q0 = spin.ms0_population(SpinState.MS0)
    q1 = spin.ms0_population(SpinState.MS1)
    snr = np.empty((p.size, t.size))
    se = np.empty_like(snr)
    for i in range(p.size):
        for j in range(t.size):
            seq = pulse_template.with_probe(p[i], t[j])
            a0 = expected_scc_counts(ens, spin, seq, q0)
            a1 = expected_scc_counts(ens, spin, seq, q1)
            snr[i, j] = spin_snr(a0, a1)
            v = scc_count_variance(ens, spin, seq, q0) + scc_count_variance(ens, spin, seq, q1)
            se[i, j] = math.sqrt(v / (a0 + a1)) if a0 + a1 > 0 else 0.0
    return SensitivitySurface(p, t, snr, tau_i, SurfaceSource.EXPECTED, se)


def _interp_snr(tau_grid, row, tau):
    """SNR between grid durations, linear in log(tau)."""
    return float(np.interp(math.log(tau), np.log(tau_grid), row))


def eta_scc(surface: SensitivitySurface, tau_w: float) -> SCCOptimum:
    """Lowest ``sqrt(tau_i + tau_w + tau_r) / SNR`` over the surface.

    The grid optimum fixes the reported cell.  The sensitivity is then refined
    by golden-section search along tau_r within the neighbouring cells of the
    optimal power row, with the SNR interpolated linearly in log(tau_r).
    """
    if tau_w < 0:
        raise DomainError("tau_w must be >= 0")
    snr = surface.snr
    if not np.any(snr > 0):
        raise ValueError("SNR surface has no positive value; sensitivity is not finite")
    base = surface.tau_i + tau_w
    cost = np.sqrt(base + surface.tau_grid)[None, :]
    with np.errstate(divide="ignore"):
        eta = np.where(snr > 0, cost / np.where(snr > 0, snr, 1.0), np.inf)
    flat = int(np.argmin(eta))  # first minimum in row-major order
    i, j = divmod(flat, snr.shape[1])
    eta_grid = float(eta[i, j])
    tg = surface.tau_grid
    tau_ref, eta_ref = float(tg[j]), eta_grid
    if tg.size > 1:
        lo = tg[max(j - 1, 0)]
        hi = tg[min(j + 1, tg.size - 1)]
        row = snr[i]

        def f(tau):
            s = _interp_snr(tg, row, tau)
            return math.sqrt(base + tau) / s if s > 0 else math.inf

        res = optimize.minimize_scalar(lambda u: f(math.exp(u)), bounds=(math.log(lo), math.log(hi)),
                                       method="bounded", options={"xatol": 1e-10})
        cand = math.exp(res.x)
        if f(cand) < eta_ref:
            tau_ref, eta_ref = cand, f(cand)
    return SCCOptimum(eta_ref, float(tg[j]), float(surface.power_grid[i]), eta_grid, tau_ref)


def eta_pl(snr_pl: float, tau_r_pl: float = DEFAULT_TAU_R_PL, tau_i: float = DEFAULT_TAU_I,
           tau_w: float = 0.0) -> float:
    """PL sensitivity ``sqrt(tau_i + tau_w + tau_r_pl) / snr_pl`` with fixed readout."""
    if not snr_pl > 0:
        raise DomainError("snr_pl must be > 0")
    if tau_w < 0 or tau_r_pl < 0 or tau_i < 0:
        raise DomainError("times must be >= 0")
    return math.sqrt(tau_i + tau_w + tau_r_pl) / snr_pl


def speedup(eta_pl_curve, eta_scc_curve, tau_w_grid=None, f_func=None,
            asymptote: float | None = None) -> SpeedupCurve:
    """Elementwise ``F = (eta_PL / eta_SCC)^2`` and the F = 1 crossing.

    Parameters
    ----------
    eta_pl_curve, eta_scc_curve : array_like
        Sensitivities on a shared wait-time grid.
    tau_w_grid : array_like, optional
        The wait times; needed for the break-even point.
    f_func : callable, optional
        Exact ``F(tau_w)`` used for bisection inside the bracketing cell.
        Without it the bisection runs on linear interpolation of F.
    asymptote : float, optional
        Large-tau_w limit, normally ``(snr_scc_best / snr_pl)^2``.

    The break-even point is the grid start when F >= 1 there, and ``None``
    when F never reaches 1.
    """
    pl = np.asarray(eta_pl_curve, dtype=float)
    sc = np.asarray(eta_scc_curve, dtype=float)
    if pl.shape != sc.shape:
        raise ValueError("curves must share the wait-time grid")
    f = (pl / sc) ** 2
    be = None
    if tau_w_grid is not None:
        tw = np.asarray(tau_w_grid, dtype=float)
        if tw.shape != f.shape:
            raise ValueError("tau_w_grid does not match the curves")
        if f.size and f[0] >= 1.0:
            be = float(tw[0])
        else:
            above = np.nonzero(f >= 1.0)[0]
            if above.size:
                k = int(above[0])
                lo, hi = float(tw[k - 1]), float(tw[k])
                if f_func is None:
                    flo, fhi = f[k - 1], f[k]
                    g = lambda x: flo + (fhi - flo) * (x - lo) / (hi - lo) - 1.0  # noqa: E731
                else:
                    g = lambda x: f_func(x) - 1.0  # noqa: E731
                be = float(optimize.bisect(g, lo, hi, xtol=1e-15, rtol=1e-12, maxiter=200))
    else:
        tw = np.arange(f.size, dtype=float)
    return SpeedupCurve(tw, f, be, asymptote)


def speedup_curve(surface: SensitivitySurface, snr_pl: float, tau_w_grid,
                  tau_r_pl: float = DEFAULT_TAU_R_PL, tau_i_pl: float | None = None) -> SpeedupCurve:
    """Speedup of SCC over PL on ``tau_w_grid`` with an exact break-even search."""
    tw = np.asarray(tau_w_grid, dtype=float)
    if np.any(tw < 0) or np.any(np.diff(tw) <= 0):
        raise ValueError("tau_w_grid must be nonnegative and strictly ascending")
    ti = surface.tau_i if tau_i_pl is None else tau_i_pl

    def f_of(x):
        return (eta_pl(snr_pl, tau_r_pl, ti, x) / eta_scc(surface, x).eta) ** 2

    pl = np.array([eta_pl(snr_pl, tau_r_pl, ti, x) for x in tw])
    sc = np.array([eta_scc(surface, x).eta for x in tw])
    return speedup(pl, sc, tw, f_func=f_of, asymptote=(surface.best_snr / snr_pl) ** 2)


def speedup_asymptote(snr_scc_best: float, snr_pl: float) -> float:
    """Large-wait-time limit ``(snr_scc_best / snr_pl)^2``."""
    if not snr_pl > 0:
        raise DomainError("snr_pl must be > 0")
    return (snr_scc_best / snr_pl) ** 2
