"""Hot Monte Carlo kernels with a numba path and a vectorised numpy path.

Both paths consume the same pre-drawn uniform variates, so results depend only
on the random stream and not on which backend ran.  The dispatching names
(:func:`scc_probe_means`, :func:`kmc_charge`) pick numba unless
``NDSCC_NUMBA=0`` is set in the environment.

The SCC kernel accumulates over NVs in index order in both paths, which makes
the two backends bit-identical.  The kinetic Monte Carlo kernel agrees up to the
last-ulp behaviour of ``log`` in the two runtimes.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# uniform slots per (shot, NV) in the SCC kernel
U_CHARGE, U_SPIN, U_SHELVE, U_IONIZE = 0, 1, 2, 3
SCC_UNIFORMS = 4

# tally slots returned by the kinetic Monte Carlo kernel
(T_CYCLES, T_LIN_ION, T_QUAD_ION, T_LIN_REC, T_QUAD_REC, T_DETECTED,
 T_OVERFLOW) = range(7)
N_TALLY = 7


def _scc_probe_means_py(u, p_pre, q, p_shelf_ms0, p_shelf_ms1, p_ion_singlet,
                        p_ion_triplet, a_minus, a_zero):
    n_shots, n_nv = u.shape[0], u.shape[1]
    out = np.empty(n_shots)
    for s in range(n_shots):
        acc = 0.0
        for i in range(n_nv):
            minus = u[s, i, 0] < p_pre[i]
            if u[s, i, 1] < q:
                p_shelf = p_shelf_ms0
            else:
                p_shelf = p_shelf_ms1
            if u[s, i, 2] < p_shelf:
                p_ion = p_ion_singlet
            else:
                p_ion = p_ion_triplet
            if minus and not (u[s, i, 3] < p_ion):
                acc += a_minus[i]
            else:
                acc += a_zero[i]
        out[s] = acc
    return out


_scc_probe_means_numba = njit(_scc_probe_means_py)


def _scc_probe_means_numpy(u, p_pre, q, p_shelf_ms0, p_shelf_ms1, p_ion_singlet,
                           p_ion_triplet, a_minus, a_zero):
    minus = u[:, :, U_CHARGE] < p_pre[None, :]
    ms0 = u[:, :, U_SPIN] < q
    shelved = u[:, :, U_SHELVE] < np.where(ms0, p_shelf_ms0, p_shelf_ms1)
    ionized = u[:, :, U_IONIZE] < np.where(shelved, p_ion_singlet, p_ion_triplet)
    final_minus = minus & ~ionized
    acc = np.zeros(u.shape[0])
    # sequential over NVs to match the compiled summation order
    for i in range(u.shape[1]):
        acc = acc + np.where(final_minus[:, i], a_minus[i], a_zero[i])
    return acc


def scc_probe_means(u, p_pre, q, p_shelf_ms0, p_shelf_ms1, p_ion_singlet,
                    p_ion_triplet, a_minus, a_zero, backend=None):
    """Expected probe photon count of each shot after an SCC conversion.

    Parameters
    ----------
    u : ndarray, shape (n_shots, n_nv, 4)
        Uniform variates in [0, 1) for charge, spin, shelving and ionisation draws.
    p_pre : ndarray, shape (n_nv,)
        NV- probability of each NV before the conversion pulses.
    q : float
        m_s=0 population of the prepared spin state.
    p_shelf_ms0, p_shelf_ms1, p_ion_singlet, p_ion_triplet : float
        Bernoulli probabilities of the shelving and ionisation maps.
    a_minus, a_zero : ndarray, shape (n_nv,)
        Expected probe counts of an NV starting the probe in NV- or NV0.
    backend : {None, "numba", "numpy"}
        Override the environment-selected backend.
    """
    args = (
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(p_pre, dtype=np.float64),
        float(q), float(p_shelf_ms0), float(p_shelf_ms1),
        float(p_ion_singlet), float(p_ion_triplet),
        np.ascontiguousarray(a_minus, dtype=np.float64),
        np.ascontiguousarray(a_zero, dtype=np.float64),
    )
    if backend is None:
        backend = "numba" if USE_NUMBA else "numpy"
    if backend == "numba":
        return _scc_probe_means_numba(*args)
    if backend == "numpy":
        return _scc_probe_means_numpy(*args)
    raise ValueError(f"unknown backend {backend!r}")


def _kmc_charge_py(u, init_minus, k_rad_det, k_rad_undet, k_lin_ion, k_quad_ion,
                   k_cyc_zero, k_lin_rec, k_quad_rec, duration, n_bins):
    n_traj, max_events = u.shape[0], u.shape[1]
    hist = np.zeros(n_bins, dtype=np.int64)
    tally = np.zeros(7, dtype=np.int64)
    occupancy = np.zeros(2)
    rate_minus = k_rad_det + k_rad_undet + k_lin_ion + k_quad_ion
    rate_zero = k_cyc_zero + k_lin_rec + k_quad_rec
    bin_width = duration / n_bins
    for j in range(n_traj):
        minus = init_minus[j]
        t = 0.0
        finished = False
        for e in range(max_events):
            total = rate_minus if minus else rate_zero
            if total <= 0.0:
                occupancy[0 if minus else 1] += duration - t
                finished = True
                break
            t_next = t + -np.log(1.0 - u[j, e, 0]) / total
            if t_next >= duration:
                occupancy[0 if minus else 1] += duration - t
                finished = True
                break
            occupancy[0 if minus else 1] += t_next - t
            t = t_next
            x = u[j, e, 1] * total
            tally[0] += 1
            if minus:
                if x < k_rad_det:
                    tally[5] += 1
                    b = int(t / bin_width)
                    if b >= n_bins:
                        b = n_bins - 1
                    hist[b] += 1
                elif x < k_rad_det + k_rad_undet:
                    pass
                elif x < k_rad_det + k_rad_undet + k_lin_ion:
                    tally[1] += 1
                    minus = False
                else:
                    tally[2] += 1
                    minus = False
            else:
                if x < k_cyc_zero:
                    pass
                elif x < k_cyc_zero + k_lin_rec:
                    tally[3] += 1
                    minus = True
                else:
                    tally[4] += 1
                    minus = True
        if not finished:
            tally[6] += 1
    return hist, tally, occupancy


_kmc_charge_numba = njit(_kmc_charge_py)


def _kmc_charge_numpy(u, init_minus, k_rad_det, k_rad_undet, k_lin_ion, k_quad_ion,
                      k_cyc_zero, k_lin_rec, k_quad_rec, duration, n_bins):
    n_traj, max_events = u.shape[0], u.shape[1]
    hist = np.zeros(n_bins, dtype=np.int64)
    tally = np.zeros(7, dtype=np.int64)
    occupancy = np.zeros(2)
    rate_minus = k_rad_det + k_rad_undet + k_lin_ion + k_quad_ion
    rate_zero = k_cyc_zero + k_lin_rec + k_quad_rec
    bin_width = duration / n_bins
    minus = init_minus.copy()
    t = np.zeros(n_traj)
    active = np.ones(n_traj, dtype=bool)
    for e in range(max_events):
        if not active.any():
            break
        total = np.where(minus, rate_minus, rate_zero)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_next = t + -np.log(1.0 - u[:, e, 0]) / total
        stop = active & ((total <= 0.0) | (t_next >= duration))
        if stop.any():
            dwell = duration - t[stop]
            occupancy[0] += dwell[minus[stop]].sum()
            occupancy[1] += dwell[~minus[stop]].sum()
        active &= ~stop
        if not active.any():
            break
        dwell = t_next[active] - t[active]
        occupancy[0] += dwell[minus[active]].sum()
        occupancy[1] += dwell[~minus[active]].sum()
        t = np.where(active, t_next, t)
        x = u[:, e, 1] * total
        tally[0] += np.count_nonzero(active)
        m = active & minus
        z = active & ~minus
        det = m & (x < k_rad_det)
        c1 = k_rad_det + k_rad_undet
        lin_i = m & (x >= c1) & (x < c1 + k_lin_ion)
        quad_i = m & (x >= c1 + k_lin_ion)
        lin_r = z & (x >= k_cyc_zero) & (x < k_cyc_zero + k_lin_rec)
        quad_r = z & (x >= k_cyc_zero + k_lin_rec)
        tally[1] += np.count_nonzero(lin_i)
        tally[2] += np.count_nonzero(quad_i)
        tally[3] += np.count_nonzero(lin_r)
        tally[4] += np.count_nonzero(quad_r)
        n_det = np.count_nonzero(det)
        if n_det:
            tally[5] += n_det
            b = np.minimum((t[det] / bin_width).astype(np.int64), n_bins - 1)
            hist += np.bincount(b, minlength=n_bins)
        flip = lin_i | quad_i | lin_r | quad_r
        minus = np.where(flip, ~minus, minus)
    tally[6] = np.count_nonzero(active)
    return hist, tally, occupancy


def kmc_charge(u, init_minus, k_rad_det, k_rad_undet, k_lin_ion, k_quad_ion,
               k_cyc_zero, k_lin_rec, k_quad_rec, duration, n_bins, backend=None):
    """Event-by-event charge and photon Monte Carlo for one NV under constant light.

    Each trajectory is a continuous-time Markov chain over {NV-, NV0}.  In NV-
    the events are radiative cycles (split into detected and undetected), single
    photon tunnelling ionisation and two-photon ionisation; NV0 has undetected
    cycles plus the two recombination channels.  Every event is one excitation
    cycle.  Each event consumes two uniforms: the waiting time and the channel.

    Returns
    -------
    hist : ndarray of int64, shape (n_bins,)
        Detected photon arrival histogram over ``[0, duration)``.
    tally : ndarray of int64, shape (7,)
        Total cycles, linear ionisations, two-photon ionisations, linear
        recombinations, two-photon recombinations, detected photons, and
        trajectories that exhausted their uniform buffer early.
    occupancy : ndarray, shape (2,)
        Total time spent in NV- and NV0 summed over trajectories.
    """
    args = (
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(init_minus, dtype=np.bool_),
        float(k_rad_det), float(k_rad_undet), float(k_lin_ion), float(k_quad_ion),
        float(k_cyc_zero), float(k_lin_rec), float(k_quad_rec),
        float(duration), int(n_bins),
    )
    if backend is None:
        backend = "numba" if USE_NUMBA else "numpy"
    if backend == "numba":
        return _kmc_charge_numba(*args)
    if backend == "numpy":
        return _kmc_charge_numpy(*args)
    raise ValueError(f"unknown backend {backend!r}")
