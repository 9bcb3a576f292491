"""Time-stepping kernels for the lumped-parameter circulation model.

Two interchangeable implementations of classic RK4 over the 12-state
system: numba-compiled scalar loops (parallel over batch rows) and a
pure-numpy version vectorized over the batch. Selection follows
``uqvae.backend``. Both use the same stepping rule - a common number of
steps per beat across the batch, chosen so every row's step is at most
``dt`` - so their results agree to integration accuracy.

Parameter vector layout (one row per simulated instance):
    0..11   EA/EB/VU per chamber (LA, LV, RA, RV)
    12..13  R_min, R_max (valves)
    14..19  systemic R/C/L arterial, R/C/L venous
    20..25  pulmonary R/C/L arterial, R/C/L venous
    26      HR (1/min)
    27..42  tC/TC/tR/TR per chamber (LA, LV, RA, RV), seconds
    43      R_VSD (0 disables the septal shunt)

State layout:
    V_LA, V_LV, p_AR^SYS, Q_AR^SYS, p_VEN^SYS, Q_VEN^SYS,
    V_RA, V_RV, p_AR^PUL, Q_AR^PUL, p_VEN^PUL, Q_VEN^PUL
"""

from __future__ import annotations

import numpy as np

from ..backend import njit, prange, use_numba

N_STATES = 12
N_THETA = 44


def steps_per_beat(t_hb_max: float, dt: float, samples_per_beat: int) -> int:
    """Common per-beat step count: a multiple of the sampling grid with
    step size at most ``dt`` for the slowest heartbeat in the batch."""
    return samples_per_beat * int(np.ceil(t_hb_max / (dt * samples_per_beat)))


# ---------------------------------------------------------------------------
# numba path


@njit(cache=True)
def _activation(t, tc, dtc, tr, dtr, t_hb):
    s = (t - tc) % t_hb
    if s < dtc:
        return 0.5 * (1.0 - np.cos(np.pi / dtc * s))
    s = (t - tr) % t_hb
    if s < dtr:
        return 0.5 * (1.0 + np.cos(np.pi / dtr * s))
    return 0.0


@njit(cache=True)
def _rhs(t, x, th, t_hb, dx):
    e_la = _activation(t, th[27], th[28], th[29], th[30], t_hb)
    e_lv = _activation(t, th[31], th[32], th[33], th[34], t_hb)
    e_ra = _activation(t, th[35], th[36], th[37], th[38], t_hb)
    e_rv = _activation(t, th[39], th[40], th[41], th[42], t_hb)
    p_la = (th[1] + th[0] * e_la) * (x[0] - th[2])
    p_lv = (th[4] + th[3] * e_lv) * (x[1] - th[5])
    p_ra = (th[7] + th[6] * e_ra) * (x[6] - th[8])
    p_rv = (th[10] + th[9] * e_rv) * (x[7] - th[11])
    rmin = th[12]
    rmax = th[13]
    sq = np.sqrt(rmax * rmin)
    ratio = rmax / rmin
    dp = p_la - p_lv
    q_mv = dp / (sq * ratio ** (np.arctan(-100.0 * np.pi * dp) / np.pi))
    dp = p_lv - x[2]
    q_av = dp / (sq * ratio ** (np.arctan(-100.0 * np.pi * dp) / np.pi))
    dp = p_ra - p_rv
    q_tv = dp / (sq * ratio ** (np.arctan(-100.0 * np.pi * dp) / np.pi))
    dp = p_rv - x[8]
    q_pv = dp / (sq * ratio ** (np.arctan(-100.0 * np.pi * dp) / np.pi))
    q_vsd = 0.0
    if th[43] > 0.0:
        q_vsd = (p_lv - p_rv) / th[43]
    dx[0] = x[11] - q_mv
    dx[1] = q_mv - q_av - q_vsd
    dx[2] = (q_av - x[3]) / th[15]
    dx[3] = (-th[14] * x[3] + x[2] - x[4]) / th[16]
    dx[4] = (x[3] - x[5]) / th[18]
    dx[5] = (-th[17] * x[5] + x[4] - p_ra) / th[19]
    dx[6] = x[5] - q_tv
    dx[7] = q_tv - q_pv + q_vsd
    dx[8] = (q_pv - x[9]) / th[21]
    dx[9] = (-th[20] * x[9] + x[8] - x[10]) / th[22]
    dx[10] = (x[9] - x[11]) / th[24]
    dx[11] = (-th[23] * x[11] + x[10] - p_la) / th[25]


@njit(cache=True)
def _integrate_one(th, x0, nps, beats, spb, out, starts):
    t_hb = 60.0 / th[26]
    h = t_hb / nps
    stride = nps // spb
    x = x0.copy()
    for i in range(N_STATES):
        starts[0, i] = x0[i]
        starts[1, i] = x0[i]
    k1 = np.empty(N_STATES)
    k2 = np.empty(N_STATES)
    k3 = np.empty(N_STATES)
    k4 = np.empty(N_STATES)
    xt = np.empty(N_STATES)
    t = 0.0
    for b in range(beats):
        if b == beats - 2:
            for i in range(N_STATES):
                starts[0, i] = x[i]
        if b == beats - 1:
            for i in range(N_STATES):
                starts[1, i] = x[i]
        last = b == beats - 1
        for s in range(nps):
            if last and s % stride == 0:
                for i in range(N_STATES):
                    out[s // stride, i] = x[i]
            _rhs(t, x, th, t_hb, k1)
            for i in range(N_STATES):
                xt[i] = x[i] + 0.5 * h * k1[i]
            _rhs(t + 0.5 * h, xt, th, t_hb, k2)
            for i in range(N_STATES):
                xt[i] = x[i] + 0.5 * h * k2[i]
            _rhs(t + 0.5 * h, xt, th, t_hb, k3)
            for i in range(N_STATES):
                xt[i] = x[i] + h * k3[i]
            _rhs(t + h, xt, th, t_hb, k4)
            for i in range(N_STATES):
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            t += h
    for i in range(N_STATES):
        out[spb, i] = x[i]


@njit(cache=True, parallel=True)
def _integrate_batch_numba(thetas, x0, nps, beats, spb):
    b = thetas.shape[0]
    out = np.empty((b, spb + 1, N_STATES))
    starts = np.empty((b, 2, N_STATES))
    for i in prange(b):
        _integrate_one(thetas[i], x0, nps, beats, spb, out[i], starts[i])
    return out, starts


# ---------------------------------------------------------------------------
# numpy path (vectorized over the batch dimension)


def _activation_np(t, tc, dtc, tr, dtr, t_hb):
    s = (t - tc) % t_hb
    contract = 0.5 * (1.0 - np.cos(np.pi / dtc * np.minimum(s, dtc)))
    s2 = (t - tr) % t_hb
    relax = 0.5 * (1.0 + np.cos(np.pi / dtr * np.minimum(s2, dtr)))
    return np.where(s < dtc, contract, np.where(s2 < dtr, relax, 0.0))


def _rhs_np(t, x, th, t_hb):
    e_la = _activation_np(t, th[:, 27], th[:, 28], th[:, 29], th[:, 30], t_hb)
    e_lv = _activation_np(t, th[:, 31], th[:, 32], th[:, 33], th[:, 34], t_hb)
    e_ra = _activation_np(t, th[:, 35], th[:, 36], th[:, 37], th[:, 38], t_hb)
    e_rv = _activation_np(t, th[:, 39], th[:, 40], th[:, 41], th[:, 42], t_hb)
    p_la = (th[:, 1] + th[:, 0] * e_la) * (x[:, 0] - th[:, 2])
    p_lv = (th[:, 4] + th[:, 3] * e_lv) * (x[:, 1] - th[:, 5])
    p_ra = (th[:, 7] + th[:, 6] * e_ra) * (x[:, 6] - th[:, 8])
    p_rv = (th[:, 10] + th[:, 9] * e_rv) * (x[:, 7] - th[:, 11])
    sq = np.sqrt(th[:, 13] * th[:, 12])
    ratio = th[:, 13] / th[:, 12]

    def qvalve(dp):
        return dp / (sq * ratio ** (np.arctan(-100.0 * np.pi * dp) / np.pi))

    q_mv = qvalve(p_la - p_lv)
    q_av = qvalve(p_lv - x[:, 2])
    q_tv = qvalve(p_ra - p_rv)
    q_pv = qvalve(p_rv - x[:, 8])
    q_vsd = np.where(th[:, 43] > 0.0, (p_lv - p_rv) / np.where(th[:, 43] > 0, th[:, 43], 1.0), 0.0)
    dx = np.empty_like(x)
    dx[:, 0] = x[:, 11] - q_mv
    dx[:, 1] = q_mv - q_av - q_vsd
    dx[:, 2] = (q_av - x[:, 3]) / th[:, 15]
    dx[:, 3] = (-th[:, 14] * x[:, 3] + x[:, 2] - x[:, 4]) / th[:, 16]
    dx[:, 4] = (x[:, 3] - x[:, 5]) / th[:, 18]
    dx[:, 5] = (-th[:, 17] * x[:, 5] + x[:, 4] - p_ra) / th[:, 19]
    dx[:, 6] = x[:, 5] - q_tv
    dx[:, 7] = q_tv - q_pv + q_vsd
    dx[:, 8] = (q_pv - x[:, 9]) / th[:, 21]
    dx[:, 9] = (-th[:, 20] * x[:, 9] + x[:, 8] - x[:, 10]) / th[:, 22]
    dx[:, 10] = (x[:, 9] - x[:, 11]) / th[:, 24]
    dx[:, 11] = (-th[:, 23] * x[:, 11] + x[:, 10] - p_la) / th[:, 25]
    return dx


def _integrate_batch_numpy(thetas, x0, nps, beats, spb):
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _integrate_batch_numpy_inner(thetas, x0, nps, beats, spb)


def _integrate_batch_numpy_inner(thetas, x0, nps, beats, spb):
    b = thetas.shape[0]
    t_hb = 60.0 / thetas[:, 26]
    h = t_hb / nps
    stride = nps // spb
    x = np.repeat(x0[None, :], b, axis=0)
    out = np.empty((b, spb + 1, N_STATES))
    starts = np.empty((b, 2, N_STATES))
    starts[:] = x0
    t = np.zeros(b)
    h2 = (0.5 * h)[:, None]
    h6 = (h / 6.0)[:, None]
    hv = h[:, None]
    for beat in range(beats):
        if beat == beats - 2:
            starts[:, 0, :] = x
        if beat == beats - 1:
            starts[:, 1, :] = x
        last = beat == beats - 1
        for s in range(nps):
            if last and s % stride == 0:
                out[:, s // stride, :] = x
            k1 = _rhs_np(t, x, thetas, t_hb)
            k2 = _rhs_np(t + 0.5 * h, x + h2 * k1, thetas, t_hb)
            k3 = _rhs_np(t + 0.5 * h, x + h2 * k2, thetas, t_hb)
            k4 = _rhs_np(t + h, x + hv * k3, thetas, t_hb)
            x = x + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = t + h
    out[:, spb, :] = x
    return out, starts


def integrate_batch(
    thetas: np.ndarray,
    x0: np.ndarray,
    dt: float,
    beats: int,
    samples_per_beat: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate a batch of parameterizations over ``beats`` heartbeats.

    Returns (last-beat samples (B, spb+1, 12) including both beat
    endpoints, beat-start states (B, 2, 12) at the openings of the last
    two beats).
    """
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    t_hb_max = float((60.0 / thetas[:, 26]).max())
    nps = steps_per_beat(t_hb_max, dt, samples_per_beat)
    if use_numba():
        return _integrate_batch_numba(thetas, x0, nps, beats, samples_per_beat)
    return _integrate_batch_numpy(thetas, x0, nps, beats, samples_per_beat)
