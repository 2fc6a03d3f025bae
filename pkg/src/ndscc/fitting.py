"""Least-squares estimation of multi-exponential PL models and AIC selection.

Also hosts the two auxiliary fits used in calibration: the PL saturation law
and the single-exponential T1 decay.

Akaike weights use the standard orientation ``exp(-(AIC_i - AIC_min) / 2)``
so the lowest-AIC model receives the largest weight.  (A sign-flipped variant
of this formula circulates in the literature; it ranks the worst model first.)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .model import DomainError, MultiExpModel, TimeSeriesTrace

WEIGHT_THRESHOLD = 0.05
N_PERTURBATIONS = 8
CONVERGENCE_RTOL = 1e-10
# a column whose residual cosine is below sqrt(rtol) can lower the RSS by
# less than rtol, so both criteria describe the same stationarity level
GRADIENT_TOL = math.sqrt(CONVERGENCE_RTOL)
# identifiability floor on the ratio between neighbouring fitted rates
MIN_RATE_RATIO = 1.5
CI_LEVEL = 0.90
# fixed key so multi-start perturbations are identical on every call
_PERTURB_SEED = 20_221_205


class NonConvergenceError(RuntimeError):
    """Raised when no candidate fit converged."""


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one multi-exponential fit.

    ``residuals`` are observed minus fitted rates (counts/s).  ``rss`` is the
    (optionally weighted) sum of squared residuals that enters the likelihood.
    ``covariance`` is ordered ``(c0, c_1, gamma_1, ..., c_n, gamma_n)``.
    """

    model: MultiExpModel
    residuals: np.ndarray
    rss: float
    n_points: int
    n_params: int
    log_likelihood: float
    aic: float
    converged: bool
    covariance: np.ndarray | None = None
    weighted: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.model.n

    def stderr(self) -> np.ndarray:
        """Standard errors in covariance order; NaN when unavailable."""
        if self.covariance is None:
            return np.full(self.n_params, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


@dataclass(frozen=True, eq=False)
class ModelSelection:
    """Fits for n = 1..n_max, Akaike weights over the converged ones, and the pick."""

    fits: dict
    weights: dict
    chosen_n: int
    excluded: tuple = ()

    @property
    def chosen(self) -> FitResult:
        return self.fits[self.chosen_n]

    @property
    def aics(self) -> dict:
        return {n: f.aic for n, f in self.fits.items()}


# -- likelihood and weights -------------------------------------------------------


def log_likelihood(residuals, n_points: int | None = None) -> float:
    """Gaussian profile log-likelihood at the least-squares optimum.

    ``0.5 * (-N * (ln(2 pi) + 1 - ln N + ln RSS))``.  A perfect fit (RSS = 0)
    returns ``+inf``, meaning the model saturates the data.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    n = r.size if n_points is None else int(n_points)
    if n < 1:
        raise ValueError("need at least one residual")
    if r.size != n:
        raise ValueError("residuals length must equal N")
    scale = float(np.max(np.abs(r)))
    if scale == 0.0 or not np.isfinite(scale):
        return log_likelihood_from_rss(float(np.dot(r, r)), n)
    # ln RSS via scaled residuals so tiny or huge residuals neither underflow nor overflow
    u = r / scale
    log_rss = 2.0 * math.log(scale) + math.log(float(np.dot(u, u)))
    return 0.5 * (-n * (math.log(2.0 * math.pi) + 1.0 - math.log(n) + log_rss))


def log_likelihood_from_rss(rss: float, n_points: int) -> float:
    if rss < 0:
        raise ValueError("rss must be >= 0")
    if rss == 0.0:
        return math.inf
    n = n_points
    return 0.5 * (-n * (math.log(2.0 * math.pi) + 1.0 - math.log(n) + math.log(rss)))


def aic(n_params: int, loglik: float) -> float:
    return 2.0 * n_params - 2.0 * loglik


def akaike_weights(aic_values) -> np.ndarray:
    """Akaike weights ``exp(-d_i/2) / sum_j exp(-d_j/2)`` with d_i = AIC_i - AIC_min.

    Models with AIC = -inf (exact fits) share all the weight.
    """
    a = np.asarray(aic_values, dtype=float).ravel()
    if a.size == 0:
        raise ValueError("need at least one AIC value")
    if np.any(np.isnan(a)) or np.any(a == np.inf):
        raise ValueError("AIC values must be finite or -inf")
    if np.any(a == -np.inf):
        w = (a == -np.inf).astype(float)
        return w / w.sum()
    rel = np.exp(-(a - a.min()) / 2.0)
    return rel / rel.sum()


# -- multi-exponential fit ----------------------------------------------------------


def _design(t, rates):
    return np.column_stack([np.ones_like(t)] + [np.exp(-g * t) for g in rates])


def _linear_amplitudes(t, y, sw, rates):
    """Amplitudes for fixed rates by linear least squares with c0 >= 0."""
    a = _design(t, rates) * sw[:, None]
    coef, *_ = np.linalg.lstsq(a, y * sw, rcond=None)
    if coef[0] < 0:
        sub, *_ = np.linalg.lstsq(a[:, 1:], y * sw, rcond=None)
        coef = np.concatenate([[0.0], sub])
    return coef


def _pack(c0, amps, rates):
    x = [c0]
    for a, g in zip(amps, rates):
        x += [a, math.log(g)]
    return np.array(x)


def _unpack(x):
    amps = x[1::2]
    rates = np.exp(x[2::2])
    return x[0], amps, rates


def _model_rate(x, t):
    c0, amps, rates = _unpack(x)
    out = np.full_like(t, c0)
    for a, g in zip(amps, rates):
        out = out + a * np.exp(-g * t)
    return out


def _jacobian(x, t, sw):
    """Jacobian of the weighted residual (model - data) w.r.t. (c0, c_k, log gamma_k)."""
    _, amps, rates = _unpack(x)
    cols = [np.ones_like(t)]
    for a, g in zip(amps, rates):
        e = np.exp(-g * t)
        cols.append(e)
        cols.append(-a * g * t * e)
    return np.column_stack(cols) * sw[:, None]


def _start_points(t, y, sw, n, duration):
    ladder = np.array([(3.0 / duration) * 10.0 ** (n - k) for k in range(1, n + 1)])
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(_PERTURB_SEED, spawn_key=(n,))))
    starts = [ladder]
    for _ in range(N_PERTURBATIONS):
        starts.append(ladder * 10.0 ** rng.uniform(-1.0, 1.0, n))
    out = []
    for rates in starts:
        rates = np.sort(rates)[::-1]
        coef = _linear_amplitudes(t, y, sw, rates)
        out.append(_pack(coef[0], coef[1:], rates))
    return out


def _gn_probe(prob, z, rss, lower, upper):
    """Relative RSS decrease offered by one damped Gauss-Newton step from ``z``."""
    j = prob.jac(z)
    r = prob.fun(z)
    jtj = j.T @ j
    lam = 1e-12 * np.trace(jtj) / jtj.shape[0]
    try:
        step = -np.linalg.solve(jtj + lam * np.eye(jtj.shape[0]), j.T @ r)
    except np.linalg.LinAlgError:
        return 0.0
    z_new = np.clip(z + step, lower, upper)
    with np.errstate(over="ignore", invalid="ignore"):
        r_new = (_model_rate(prob.to_x(z_new), prob.t) - prob.y) * prob.sw
    rss_new = float(np.dot(r_new, r_new))
    if not np.isfinite(rss_new) or rss == 0:
        return 0.0
    return (rss - rss_new) / rss


def _bounds(n, duration, bin_width):
    """c0 >= 0; log-rates kept between 1e-2/T and 10/bin_width.

    A faster term would decay inside the first bin and leave its rate unconstrained.
    """
    lower = np.full(2 * n + 1, -np.inf)
    upper = np.full(2 * n + 1, np.inf)
    lower[0] = 0.0
    lower[2::2] = math.log(1e-2 / duration)
    upper[2::2] = math.log(10.0 / bin_width)
    return lower, upper


class _GapProblem:
    """Least squares in ordered-gap coordinates.

    ``z = (c0, c_1..c_n, u, d_2..d_n)`` with rates ascending:
    ``log gamma_k = u + d_2 + ... + d_k`` and every gap ``d >= log MIN_RATE_RATIO``.
    The upper log-rate limit on the fastest term is a penalty row.
    """

    def __init__(self, t, y, sw, lower, upper):
        self.t, self.y, self.sw = t, y, sw
        self.n = (lower.size - 1) // 2
        self.lo, self.hi = float(lower[2]), float(upper[2])
        self.rho = float(np.linalg.norm(y * sw)) or 1.0
        self.tri = np.tril(np.ones((self.n, self.n)))

    def log_rates(self, theta):
        return self.tri @ theta

    def theta_bounds(self):
        gap = math.log(MIN_RATE_RATIO)
        lo = np.array([self.lo] + [gap] * (self.n - 1))
        hi = np.array([self.hi] + [self.hi - self.lo] * (self.n - 1))
        return lo, hi

    def theta_from_rates(self, rates):
        lr = np.sort(np.log(rates))
        theta = np.concatenate([[lr[0]], np.diff(lr)])
        lo, hi = self.theta_bounds()
        span = hi - lo
        return np.minimum(np.maximum(theta, lo + 1e-6 * span), hi - 1e-6 * span)

    def penalty(self, theta):
        return self.rho * max(0.0, float(np.sum(theta)) - self.hi)

    def varpro(self, theta):
        rates = np.exp(self.log_rates(theta))
        coef = _linear_amplitudes(self.t, self.y, self.sw, rates)
        r = (_design(self.t, rates) @ coef - self.y) * self.sw
        return np.append(r, self.penalty(theta)), coef

    def to_x(self, z):
        n = self.n
        rates = np.exp(self.log_rates(z[n + 1:]))
        order = np.argsort(-rates)
        return _pack(z[0], z[1:n + 1][order], rates[order])

    def fun(self, z):
        r = (_model_rate(self.to_x(z), self.t) - self.y) * self.sw
        return np.append(r, self.penalty(z[self.n + 1:]))

    def jac(self, z):
        n = self.n
        theta = z[n + 1:]
        amps = z[1:n + 1]
        rates = np.exp(self.log_rates(theta))
        t, sw = self.t, self.sw
        e = np.exp(-np.outer(t, rates))
        d_lr = -(amps * rates)[None, :] * t[:, None] * e
        body = np.column_stack([np.ones_like(t)[:, None], e, d_lr @ self.tri]) * sw[:, None]
        row = np.zeros(2 * n + 1)
        if float(np.sum(theta)) > self.hi:
            row[n + 1:] = self.rho
        return np.vstack([body, row])

    def z_bounds(self):
        lo, hi = self.theta_bounds()
        n = self.n
        return (np.concatenate([[0.0], np.full(n, -np.inf), lo]),
                np.concatenate([[np.inf], np.full(n, np.inf), hi]))


def _solve_from(x0, t, y, sw, lower, upper):
    """Variable projection over ordered log-rate gaps, then a full-parameter polish.

    Returns the natural parameter vector, RSS, the relative RSS gain of one
    further Gauss-Newton step, the scaled projected gradient and the solver
    result.
    """
    prob = _GapProblem(t, y, sw, lower, upper)
    th_lo, th_hi = prob.theta_bounds()
    theta0 = prob.theta_from_rates(np.exp(x0[2::2]))
    vp = optimize.least_squares(lambda th: prob.varpro(th)[0], theta0, jac="3-point",
                                bounds=(th_lo, th_hi), method="trf",
                                ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=200 * theta0.size)
    _, coef = prob.varpro(vp.x)
    z_lo, z_hi = prob.z_bounds()
    z = np.concatenate([[max(coef[0], 0.0)], coef[1:], vp.x])
    span = np.where(np.isfinite(z_hi - z_lo), z_hi - z_lo, 1.0)
    z = np.minimum(np.maximum(z, z_lo + 1e-9 * span), z_hi - 1e-9 * span)
    res = optimize.least_squares(prob.fun, z, jac=prob.jac, bounds=(z_lo, z_hi), method="trf",
                                 x_scale="jac", ftol=1e-14, xtol=1e-14, gtol=1e-14,
                                 max_nfev=50 * z.size)
    z = res.x
    x = prob.to_x(z)
    r = (_model_rate(x, t) - y) * sw
    rss = float(np.dot(r, r))
    gain = _gn_probe(prob, z, rss, z_lo, z_hi)
    j = prob.jac(z)
    rr = prob.fun(z)
    grad = j.T @ rr
    # components held at a bound by an outward gradient carry no stationarity information
    at_lo = (z - z_lo <= 1e-6 * span) & (grad > 0)
    at_hi = (z_hi - z <= 1e-6 * span) & (grad < 0)
    grad = np.where(at_lo | at_hi, 0.0, grad)
    col = np.linalg.norm(j, axis=0)
    # largest cosine between the residual and any Jacobian column
    cosine = float(np.max(np.abs(grad) / np.where(col > 0, col, 1.0))) / (float(np.linalg.norm(rr)) or 1.0)
    return x, rss, gain, cosine, res


def _natural_covariance(x, t, sw, rss, n_points):
    """Covariance of (c0, c_k, gamma_k) from the log-rate Jacobian."""
    j = _jacobian(x, t, sw)
    dof = n_points - x.size
    if dof <= 0:
        return None, 0
    if not np.all(np.isfinite(j)):
        return None, 0
    try:
        s = np.linalg.svd(j, compute_uv=False)
    except np.linalg.LinAlgError:
        return None, 0
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0
    scale = np.ones(x.size)
    scale[2::2] = np.exp(x[2::2])  # d gamma / d log gamma
    jn = j / scale[None, :]
    try:
        cov = np.linalg.pinv(jn.T @ jn) * (rss / dof)
    except np.linalg.LinAlgError:
        cov = None
    return cov, rank


def fit_multiexp(trace: TimeSeriesTrace, n: int, init: str = "ladder", weighted: bool = False,
                 n_starts: int | None = None) -> FitResult:
    """Fit ``c0 + sum_k c_k exp(-gamma_k tau)`` to the per-bin rates of ``trace``.

    Parameters
    ----------
    trace : TimeSeriesTrace
    n : int
        Number of exponential terms, 1 to 3 (larger values are accepted).
    init : {"ladder"}
        Starting strategy.  The ladder places rate guesses at ``(3/T) 10^(n-k)``;
        it is followed by ``N_PERTURBATIONS`` log-uniform perturbations within a
        decade.  Amplitudes for each start come from linear least squares.
    weighted : bool
        Weight squared residuals by ``1 / max(counts, 1)``.  Off by default.
    n_starts : int, optional
        Use only the first ``n_starts`` starting points.

    Returns
    -------
    FitResult
        Best-RSS candidate (ties go to the earliest start).  When no candidate
        yields a valid model, or every candidate has a rank-deficient Jacobian,
        ``converged`` is False and ``diagnostics`` explains why.
    """
    if init != "ladder":
        raise ValueError(f"unknown init strategy {init!r}")
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    n_params = 2 * n + 1
    n_points = len(trace)
    if n_points < n_params + 1:
        raise ValueError(f"need at least {n_params + 1} bins for n={n}")
    t = np.asarray(trace.bin_starts, dtype=float) - float(trace.bin_starts[0])
    y = trace.rates
    sw = 1.0 / np.sqrt(np.maximum(trace.counts, 1)) if weighted else np.ones_like(y)
    if weighted:
        sw = sw / sw.max()
    duration = trace.duration
    starts = _start_points(t, y, sw, n, duration)
    lower, upper = _bounds(n, duration, trace.bin_width)
    if n_starts is not None:
        starts = starts[:max(1, int(n_starts))]

    best = None
    rejected = []
    ranks = []
    for idx, x0 in enumerate(starts):
        try:
            x, rss, gain, cosine, res = _solve_from(x0, t, y, sw, lower, upper)
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            rejected.append((idx, f"solver error: {exc}"))
            continue
        c0, amps, rates = _unpack(x)
        if not (np.all(np.isfinite(x)) and np.isfinite(rss)):
            rejected.append((idx, "non-finite optimum"))
            continue
        try:
            model = MultiExpModel.from_arrays(c0, amps, rates)
        except ValueError as exc:
            rejected.append((idx, f"invalid model: {exc}"))
            continue
        cov, rank = _natural_covariance(x, t, sw, rss, n_points)
        cand = dict(idx=idx, x=x, rss=rss, gain=gain, cosine=cosine, model=model, cov=cov,
                    rank=rank, status=res.status)
        ranks.append(rank)
        if best is None or rss < best["rss"]:
            best = cand

    if best is None:
        nan = np.full(n_points, np.nan)
        return FitResult(MultiExpModel(0.0, ()), nan, math.inf, n_points, n_params,
                         -math.inf, math.inf, False, None, weighted,
                         {"reason": "no valid candidate", "rejected": rejected})

    x = best["x"]
    order = np.argsort(-np.exp(x[2::2]))
    rss = best["rss"]
    fitted = _model_rate(x, t)
    residuals = y - fitted
    ll = log_likelihood_from_rss(rss, n_points)
    persistent_deficiency = all(rk < n_params for rk in ranks)
    converged = bool(best["gain"] < CONVERGENCE_RTOL and best["cosine"] < GRADIENT_TOL
                     and not persistent_deficiency)
    cov = best["cov"]
    if cov is not None:
        perm = [0]
        for k in order:
            perm += [1 + 2 * k, 2 + 2 * k]
        cov = cov[np.ix_(perm, perm)]
    diagnostics = {
        "start_index": best["idx"],
        "rss_gain_last_step": best["gain"],
        "scaled_gradient": best["cosine"],
        "jacobian_rank": best["rank"],
        "solver_status": int(best["status"]),
        "rejected_starts": len(rejected),
    }
    if persistent_deficiency:
        diagnostics["reason"] = "rank-deficient Jacobian at every start"
    return FitResult(best["model"], residuals, rss, n_points, n_params, ll, aic(n_params, ll),
                     converged, cov, weighted, diagnostics)


def select_model(trace: TimeSeriesTrace, n_max: int = 3, init: str = "ladder",
                 weighted: bool = False) -> ModelSelection:
    """Fit n = 1..n_max and pick the simplest model with Akaike weight >= 0.05.

    Non-converged fits are excluded from the weights and listed in ``excluded``.

    Raises
    ------
    NonConvergenceError
        If no member fit converged.
    """
    fits = {}
    for n in range(1, int(n_max) + 1):
        if len(trace) < 2 * n + 2:
            break
        fits[n] = fit_multiexp(trace, n, init=init, weighted=weighted)
    ok = [n for n, f in fits.items() if f.converged]
    excluded = tuple(n for n in fits if n not in ok)
    if not ok:
        raise NonConvergenceError("no member fit converged")
    w = akaike_weights([fits[n].aic for n in ok])
    weights = {n: float(wi) for n, wi in zip(ok, w)}
    return ModelSelection(fits, weights, choose_model(weights), excluded)


def choose_model(weights: dict) -> int:
    """Smallest model order whose Akaike weight reaches ``WEIGHT_THRESHOLD``.

    Falls back to the highest-weight (lowest-AIC) order, which only matters
    for more than 20 candidates.
    """
    if not weights:
        raise ValueError("no candidate models")
    passing = [n for n, w in weights.items() if w >= WEIGHT_THRESHOLD]
    if passing:
        return min(passing)
    return max(weights, key=weights.get)


# -- auxiliary fits -------------------------------------------------------------------


@dataclass(frozen=True)
class SaturationFit:
    pl_sat: float
    i_sat: float
    pl_sat_ci: tuple
    i_sat_ci: tuple
    unbounded: bool
    rss: float


@dataclass(frozen=True)
class T1Fit:
    t1: float
    amplitude: float
    offset: float
    t1_ci: tuple
    unidentifiable: bool
    rss: float


def saturation_curve(power, pl_sat, i_sat):
    """``pl_sat / (1 + i_sat / P)``."""
    power = np.asarray(power, dtype=float)
    return pl_sat * power / (power + i_sat)


def _interval(value, se, dof):
    if not np.isfinite(se) or dof <= 0:
        return (-math.inf, math.inf)
    q = stats.t.ppf(0.5 + CI_LEVEL / 2.0, dof)
    return (value - q * se, value + q * se)


def _covariance(jac, rss, dof):
    if dof <= 0:
        return np.full((jac.shape[1],) * 2, np.inf)
    # equilibrate columns so the conditioning test sees shape, not units
    norms = np.linalg.norm(jac, axis=0)
    if np.any(norms == 0):
        return np.full((jac.shape[1],) * 2, np.inf)
    jtj = (jac / norms).T @ (jac / norms)
    if np.linalg.cond(jtj) > 1e14:
        return np.full_like(jtj, np.inf)
    return np.linalg.inv(jtj) / np.outer(norms, norms) * (rss / dof)


def _residual_scale(y, relative: bool):
    if not relative:
        return np.ones_like(y)
    if np.any(y <= 0):
        raise DomainError("relative residuals need positive data")
    return 1.0 / y


def fit_saturation(powers, pl_rates, relative: bool = False) -> SaturationFit:
    """Least-squares fit of ``PL = pl_sat / (1 + i_sat / P)`` with 90% intervals.

    The interval on ``i_sat`` is flagged unbounded when the data show no
    curvature (the fitted ``i_sat`` lies far above the largest power or the
    interval reaches zero).  ``relative=True`` minimises residuals divided by
    the data, the maximum-likelihood choice for multiplicative noise.
    """
    p = np.asarray(powers, dtype=float).ravel()
    y = np.asarray(pl_rates, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError("powers and rates must have equal length")
    sw = _residual_scale(y, relative)
    if np.any(p <= 0):
        raise DomainError("powers must be > 0")
    if np.unique(p).size < 3:
        raise ValueError("need at least 3 distinct powers")
    # Lineweaver-Burk style start: 1/PL = 1/pl_sat + (i_sat/pl_sat)/P
    pos = y > 0
    slope, icpt = np.polyfit(1.0 / p[pos], 1.0 / y[pos], 1) if pos.sum() >= 2 else (1.0, 1.0)
    if icpt <= 0 or slope <= 0:
        pl0, is0 = 2.0 * y.max(), float(np.median(p))
    else:
        pl0, is0 = 1.0 / icpt, slope / icpt
    x0 = np.log([pl0, is0])

    def fun(x):
        return (saturation_curve(p, math.exp(x[0]), math.exp(x[1])) - y) * sw

    def jac(x):
        a, b = math.exp(x[0]), math.exp(x[1])
        d = p + b
        return np.column_stack([a * p / d, -a * p * b / d ** 2]) * sw[:, None]

    res = optimize.least_squares(fun, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                                 gtol=1e-15, max_nfev=5000)
    a, b = math.exp(res.x[0]), math.exp(res.x[1])
    rss = float(np.dot(res.fun, res.fun))
    dof = p.size - 2
    jn = jac(res.x) / np.array([a, b])[None, :]
    cov = _covariance(jn, rss, dof)
    se = np.sqrt(np.abs(np.diag(cov)))
    ci_a = _interval(a, se[0], dof)
    ci_b = _interval(b, se[1], dof)
    unbounded = bool(not np.isfinite(se[1]) or ci_b[0] <= 0 or b > 10.0 * p.max())
    return SaturationFit(a, b, ci_a, ci_b, unbounded, rss)


def t1_curve(t, amplitude, t1, offset):
    return amplitude * np.exp(-np.asarray(t, dtype=float) / t1) + offset


def fit_t1(delays, signals, relative: bool = False) -> T1Fit:
    """Fit ``A exp(-t / T1) + B`` and report T1 with a 90% interval.

    Data without a resolvable decay (amplitude consistent with zero, or T1
    outside ten times the sampled range) is flagged ``unidentifiable``.
    ``relative=True`` minimises residuals divided by the data.
    """
    t = np.asarray(delays, dtype=float).ravel()
    y = np.asarray(signals, dtype=float).ravel()
    if t.shape != y.shape:
        raise ValueError("delays and signals must have equal length")
    if t.size < 4:
        raise ValueError("need at least 4 delay points")
    if np.any(t < 0):
        raise DomainError("delays must be >= 0")
    tpos = t[t > 0]
    if tpos.size == 0 or t.max() < 10.0 * tpos.min():
        raise ValueError("delays must span at least one decade")
    order = np.argsort(t)
    t, y = t[order], y[order]
    sw = _residual_scale(y, relative)
    span = float(np.ptp(y))
    if span == 0.0:
        return T1Fit(math.nan, 0.0, float(y[0]), (-math.inf, math.inf), True, 0.0)
    b0 = float(y[-1])
    a0 = float(y[0] - y[-1]) or span
    # pick the grid T1 with the best linear fit of (A, B)
    grid = np.geomspace(tpos.min() / 3.0, t.max() * 3.0, 60)
    best = None
    for tau in grid:
        m = np.column_stack([np.exp(-t / tau), np.ones_like(t)])
        coef, *_ = np.linalg.lstsq(m * sw[:, None], y * sw, rcond=None)
        r = (m @ coef - y) * sw
        s = float(np.dot(r, r))
        if best is None or s < best[0]:
            best = (s, tau, coef)
    _, tau0, (a0, b0) = best
    x0 = np.array([a0, math.log(tau0), b0])

    def fun(x):
        return (t1_curve(t, x[0], math.exp(x[1]), x[2]) - y) * sw

    def jac(x):
        e = np.exp(-t / math.exp(x[1]))
        return np.column_stack([e, x[0] * e * t / math.exp(x[1]), np.ones_like(t)]) * sw[:, None]

    res = optimize.least_squares(fun, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15,
                                 gtol=1e-15, max_nfev=5000)
    amp, t1, off = res.x[0], math.exp(res.x[1]), res.x[2]
    rss = float(np.dot(res.fun, res.fun))
    dof = t.size - 3
    jn = jac(res.x) / np.array([1.0, t1, 1.0])[None, :]
    cov = _covariance(jn, rss, dof)
    se = np.sqrt(np.abs(np.diag(cov)))
    ci = _interval(t1, se[1], dof)
    amp_zero = not np.isfinite(se[0]) or abs(amp) < 3.0 * se[0] if rss > 0 else abs(amp) == 0
    unident = bool(amp_zero or not np.isfinite(se[1]) or ci[0] <= 0 or t1 > 10.0 * t.max())
    return T1Fit(float(t1), float(amp), float(off), ci, unident, rss)
