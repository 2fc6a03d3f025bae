"""Charge-readout figures of merit derived from fitted PL models.

All photon numbers are expected counts per single shot, so a model fitted to
a trace's per-shot rates gives ``alpha(tau)`` directly through
:func:`ndscc.model.cumulative_counts`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .model import DomainError, MultiExpModel, cumulative_counts


@dataclass(frozen=True)
class PeakSNR:
    tau: float
    power: float
    snr: float


@dataclass(frozen=True, eq=False)
class ChargeReadoutReport:
    """Contrast, SNR curve and sensitivity of one nanodiamond."""

    contrast_pct: float
    tau_grid: np.ndarray
    snr_curve: np.ndarray
    peak: PeakSNR
    eta_c: float
    fom: tuple
    degenerate: bool = False


def contrast(s532_0: float, s592_0: float) -> float:
    """Initial optical contrast ``(1 - S592(0) / S532(0)) * 100`` in percent."""
    if not s532_0 > 0:
        raise DomainError("s532_0 must be > 0")
    return (1.0 - s592_0 / s532_0) * 100.0


def model_contrast(model_532: MultiExpModel, model_592: MultiExpModel) -> float:
    """Contrast from fitted models evaluated at tau = 0."""
    return contrast(model_532.initial_rate(), model_592.initial_rate())


def charge_snr(model_532: MultiExpModel, model_592: MultiExpModel, tau, return_flag=False):
    """Single-shot charge SNR ``(a532 - a592) / sqrt(a532 + a592)``.

    Where the total expected count is not positive the SNR is reported as 0;
    with ``return_flag=True`` a boolean array marking those points is also
    returned.
    """
    t = np.asarray(tau, dtype=float)
    if np.any(t <= 0):
        raise DomainError("tau must be > 0")
    a = np.asarray(cumulative_counts(model_532, t))
    b = np.asarray(cumulative_counts(model_592, t))
    total = a + b
    bad = ~(total > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        snr = np.where(bad, 0.0, (a - b) / np.sqrt(np.where(bad, 1.0, total)))
    if snr.ndim == 0:
        snr, bad = float(snr), bool(bad)
    return (snr, bad) if return_flag else snr


def _refine_tau(f, grid, j):
    """Golden-section maximisation of ``f`` on the cells adjacent to grid index j."""
    lo = grid[max(j - 1, 0)]
    hi = grid[min(j + 1, grid.size - 1)]
    mid = grid[j]
    neg = lambda x: -f(x)  # noqa: E731
    try:
        if 0 < j < grid.size - 1:
            x = optimize.golden(neg, brack=(lo, mid, hi), tol=1e-10)
            x = min(max(x, lo), hi)
        else:
            x = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                         options={"xatol": 1e-12 * hi}).x
    except (ValueError, RuntimeError):
        return mid, f(mid)
    fx = f(x)
    return (x, fx) if fx > f(mid) else (mid, f(mid))


def peak_snr(models, tau_grid) -> PeakSNR:
    """Grid maximum of the charge SNR over powers and durations, refined along tau.

    Parameters
    ----------
    models : dict
        ``{probe_power: (model_532, model_592)}``.
    tau_grid : array_like
        Positive, ascending readout durations.
    """
    grid = np.asarray(tau_grid, dtype=float)
    if grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("tau_grid must be positive and strictly ascending")
    if not models:
        raise ValueError("need at least one probe power")
    best = None
    for power in sorted(models):
        m532, m592 = models[power]
        curve = charge_snr(m532, m592, grid)
        j = int(np.argmax(curve))
        if best is None or curve[j] > best[2]:
            best = (power, j, float(curve[j]), m532, m592)
    power, j, snr_grid, m532, m592 = best
    if snr_grid <= 0:
        return PeakSNR(float(grid[j]), float(power), max(snr_grid, 0.0))
    tau, snr = _refine_tau(lambda x: float(charge_snr(m532, m592, x)), grid, j)
    return PeakSNR(float(tau), float(power), float(max(snr, snr_grid)))


def charge_sensitivity(snr: float, tau_r: float) -> float:
    """Time-averaged charge sensitivity ``sqrt(tau_r) / snr`` in 1/sqrt(Hz)."""
    if not snr > 0:
        raise DomainError("snr must be > 0")
    if not tau_r > 0:
        raise DomainError("tau_r must be > 0")
    return math.sqrt(tau_r) / snr


def minimum_resolvable(eta: float, total_time: float) -> float:
    """Smallest resolvable charge variation ``eta / sqrt(T)`` after time T."""
    return eta / math.sqrt(total_time)


def fom(fit532, fit592, i: int) -> float:
    """``(C_i^532 - C_i^592) / gamma_i`` with terms ranked by descending rate.

    ``i`` is 1-based; ``gamma_i`` comes from the 532 nm fit.  Accepts FitResult
    objects or bare models.
    """
    m532 = getattr(fit532, "model", fit532)
    m592 = getattr(fit592, "model", fit592)
    if i < 1:
        raise ValueError("term index is 1-based")
    for name, m in (("532 nm", m532), ("592 nm", m592)):
        if m.n < i:
            raise ValueError(f"{name} fit has {m.n} terms and lacks term {i}")
    a532, g532 = m532.terms[i - 1]
    a592, _ = m592.terms[i - 1]
    return (a532 - a592) / g532


def pearson(x, y) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("x and y must have equal length")
    if x.size < 3:
        raise ValueError("need at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(np.dot(dx, dx)), math.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ValueError("zero variance; correlation undefined")
    return float(np.clip(np.dot(dx, dy) / (sx * sy), -1.0, 1.0))


def charge_readout_report(models, tau_grid, n_fom: int = 3) -> ChargeReadoutReport:
    """Figures of merit for one nanodiamond.

    ``models`` maps probe power to a ``(fit_or_model_532, fit_or_model_592)``
    pair.  Contrast and FOM use the lowest probe power; the SNR curve is the
    one at the peak power.
    """
    bare = {p: tuple(getattr(m, "model", m) for m in pair) for p, pair in models.items()}
    p_low = min(bare)
    rho = model_contrast(*bare[p_low])
    peak = peak_snr(bare, tau_grid)
    grid = np.asarray(tau_grid, dtype=float)
    curve = charge_snr(*bare[peak.power], grid)
    degenerate = peak.snr <= 0
    eta = math.inf if degenerate else charge_sensitivity(peak.snr, peak.tau)
    low = models[p_low]
    foms = []
    for i in range(1, n_fom + 1):
        try:
            foms.append(fom(low[0], low[1], i))
        except ValueError:
            foms.append(math.nan)
    return ChargeReadoutReport(rho, grid, np.asarray(curve), peak, eta, tuple(foms), degenerate)
