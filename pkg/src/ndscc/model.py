"""Multi-exponential photoluminescence model and binned photon-count traces."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

RATE_DISTINCT_RTOL = 1e-6


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class Pump(str, enum.Enum):
    PUMP_532 = "PUMP_532"
    PUMP_592 = "PUMP_592"


@dataclass(frozen=True)
class MultiExpModel:
    """PL rate ``c0 + sum_k c_k exp(-gamma_k tau)`` in counts/s, tau in s.

    ``terms`` is normalised at construction to strictly descending rates.
    Amplitudes may be negative (non-monotonic recoveries); ``c0`` may not.
    """

    c0: float
    terms: tuple = ()

    def __post_init__(self):
        c0 = float(self.c0)
        if not np.isfinite(c0) or c0 < 0:
            raise ValueError(f"c0 must be finite and nonnegative, got {self.c0!r}")
        terms = tuple((float(a), float(g)) for a, g in self.terms)
        for a, g in terms:
            if not (np.isfinite(a) and np.isfinite(g)):
                raise ValueError("amplitudes and rates must be finite")
            if g <= 0:
                raise ValueError(f"rates must be positive, got {g!r}")
        terms = tuple(sorted(terms, key=lambda ag: -ag[1]))
        for (_, g_hi), (_, g_lo) in zip(terms, terms[1:]):
            if (g_hi - g_lo) <= RATE_DISTINCT_RTOL * g_hi:
                raise ValueError(f"rates {g_hi!r} and {g_lo!r} are not distinct")
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "terms", terms)

    @property
    def n(self) -> int:
        return len(self.terms)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([a for a, _ in self.terms], dtype=float)

    @property
    def rates(self) -> np.ndarray:
        return np.array([g for _, g in self.terms], dtype=float)

    def initial_rate(self) -> float:
        """S(0) = c0 + sum of amplitudes."""
        return self.c0 + float(sum(a for a, _ in self.terms))

    def scaled(self, factor: float) -> "MultiExpModel":
        """Model with all count rates multiplied by ``factor``."""
        return MultiExpModel(self.c0 * factor, tuple((a * factor, g) for a, g in self.terms))

    @classmethod
    def from_arrays(cls, c0, amplitudes, rates) -> "MultiExpModel":
        return cls(float(c0), tuple(zip(np.ravel(amplitudes), np.ravel(rates))))


def _check_tau(tau):
    t = np.asarray(tau, dtype=float)
    if np.any(~np.isfinite(t)) or np.any(t < 0):
        raise DomainError("tau must be finite and >= 0")
    return t


def evaluate(model: MultiExpModel, tau):
    """PL rate (counts/s) at probe time ``tau`` (s); scalar or array."""
    t = _check_tau(tau)
    out = np.full(t.shape, model.c0)
    for a, g in model.terms:
        out = out + a * np.exp(-g * t)
    return float(out) if out.ndim == 0 else out


def cumulative_counts(model: MultiExpModel, tau):
    """Expected photons integrated from 0 to ``tau``, in closed form.

    ``c0 tau + sum_k (c_k / gamma_k)(1 - exp(-gamma_k tau))``
    """
    t = _check_tau(tau)
    out = model.c0 * t
    for a, g in model.terms:
        out = out + (a / g) * -np.expm1(-g * t)
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeriesTrace:
    """Time-correlated photon counts summed over ``shots`` probe repetitions."""

    bin_starts: np.ndarray
    bin_width: float
    counts: np.ndarray
    shots: int
    pump_label: Pump
    probe_power: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        starts = _frozen(self.bin_starts, float)
        raw_counts = np.asarray(self.counts)
        if raw_counts.size and not np.all(np.equal(np.mod(raw_counts, 1), 0)):
            raise ValueError("counts must be integers")
        counts = _frozen(raw_counts, np.int64)
        if starts.ndim != 1 or counts.shape != starts.shape:
            raise ValueError("counts length must equal bin_starts length")
        width = float(self.bin_width)
        if not width > 0:
            raise ValueError("bin_width must be > 0")
        if int(self.shots) != self.shots or int(self.shots) < 1:
            raise ValueError("shots must be a positive integer")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if starts.size > 1:
            steps = np.diff(starts)
            if np.any(steps <= 0):
                raise ValueError("bin_starts must be strictly ascending")
            if not np.allclose(steps, width, rtol=1e-9, atol=0):
                raise ValueError("bin_starts must be uniformly spaced by bin_width")
        if not float(self.probe_power) >= 0:
            raise ValueError("probe_power must be >= 0")
        object.__setattr__(self, "bin_starts", starts)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "bin_width", width)
        object.__setattr__(self, "shots", int(self.shots))
        object.__setattr__(self, "pump_label", Pump(self.pump_label))
        object.__setattr__(self, "probe_power", float(self.probe_power))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self):
        return self.counts.size

    @property
    def rates(self) -> np.ndarray:
        """Per-bin rate estimate counts / (shots * bin_width), counts/s."""
        return self.counts / (self.shots * self.bin_width)

    @property
    def duration(self) -> float:
        return float(self.bin_starts[-1] + self.bin_width - self.bin_starts[0])

    def rescaled_time(self, factor: float) -> "TimeSeriesTrace":
        """Same counts on a time axis multiplied by ``factor``."""
        return TimeSeriesTrace(
            self.bin_starts * factor, self.bin_width * factor, self.counts, self.shots,
            self.pump_label, self.probe_power, self.metadata,
        )

    def same_as(self, other: "TimeSeriesTrace") -> bool:
        """Field-by-field equality with bit-equal floats."""
        return (
            np.array_equal(self.bin_starts, other.bin_starts)
            and self.bin_width == other.bin_width
            and np.array_equal(self.counts, other.counts)
            and self.shots == other.shots
            and self.pump_label == other.pump_label
            and self.probe_power == other.probe_power
        )


def uniform_bins(duration: float, n_bins: int) -> tuple[np.ndarray, float]:
    """Bin start times and width for ``n_bins`` uniform bins over ``duration``."""
    if not duration > 0:
        raise ValueError("duration must be > 0")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    width = duration / n_bins
    return np.arange(n_bins) * width, width
