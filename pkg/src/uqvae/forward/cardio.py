"""Closed-loop lumped-parameter (0D) model of the human circulation.

Four elastance-driven chambers, systemic and pulmonary arterial/venous
compartments (RLC), nonlinear diode-like valves, and an optional
ventricular septal shunt. The system is integrated over 25 heartbeats to
wash out transients and clinical output functionals are extracted from
the last beat.

Pressures in mmHg, volumes in mL, flows in mL/s, times in s.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from ..errors import EmptyTrajectory, ForwardFailure, IntegratorBlowup
from . import ForwardModel
from .cardio_kernels import N_THETA, integrate_batch

AORTIC_ANNULUS_RADIUS_CM = 1.5

# fraction of the beat period for each timing parameter; relaxation onset
# is contraction onset plus contraction duration
TIMING_FRACTIONS = {
    "tC_LA": 0.79, "TC_LA": 0.11, "TR_LA": 0.80,
    "tC_LV": 0.00, "TC_LV": 0.35, "TR_LV": 0.40,
    "tC_RA": 0.80, "TC_RA": 0.10, "TR_RA": 0.70,
    "tC_RV": 0.00, "TC_RV": 0.30, "TR_RV": 0.40,
}

REFERENCE_VALUES = {
    "EA_LA": 0.2273, "EB_LA": 0.209, "V_U_LA": 2.0,
    "EA_LV": 3.0391, "EB_LV": 0.10, "V_U_LV": 16.0,
    "EA_RA": 0.0429, "EB_RA": 0.0636, "V_U_RA": 2.0,
    "EA_RV": 0.6683, "EB_RV": 0.07, "V_U_RV": 16.0,
    "R_min": 0.0075, "R_max": 75006.2,
    "R_AR_SYS": 0.588, "C_AR_SYS": 0.96, "L_AR_SYS": 0.005,
    "R_VEN_SYS": 0.352, "C_VEN_SYS": 60.0, "L_VEN_SYS": 0.0005,
    "R_AR_PUL": 0.104, "C_AR_PUL": 5.0, "L_AR_PUL": 0.0005,
    "R_VEN_PUL": 0.0105, "C_VEN_PUL": 16.0, "L_VEN_PUL": 0.0005,
    "HR": 75.0,
}

GSA_PARAM_NAMES = list(REFERENCE_VALUES)  # the 27 parameters screened by GSA

_THETA_ORDER = [
    "EA_LA", "EB_LA", "V_U_LA", "EA_LV", "EB_LV", "V_U_LV",
    "EA_RA", "EB_RA", "V_U_RA", "EA_RV", "EB_RV", "V_U_RV",
    "R_min", "R_max",
    "R_AR_SYS", "C_AR_SYS", "L_AR_SYS", "R_VEN_SYS", "C_VEN_SYS", "L_VEN_SYS",
    "R_AR_PUL", "C_AR_PUL", "L_AR_PUL", "R_VEN_PUL", "C_VEN_PUL", "L_VEN_PUL",
    "HR",
    "tC_LA", "TC_LA", "tR_LA", "TR_LA",
    "tC_LV", "TC_LV", "tR_LV", "TR_LV",
    "tC_RA", "TC_RA", "tR_RA", "TR_RA",
    "tC_RV", "TC_RV", "tR_RV", "TR_RV",
]

STATE_NAMES = [
    "V_LA", "V_LV", "p_AR_SYS", "Q_AR_SYS", "p_VEN_SYS", "Q_VEN_SYS",
    "V_RA", "V_RV", "p_AR_PUL", "Q_AR_PUL", "p_VEN_PUL", "Q_VEN_PUL",
]

# start-of-run state; any physiologic start works since 25 beats wash out
# transients (the periodicity indicator guards that). Tuned so the
# reference parameterization lands inside the healthy clinical ranges.
DEFAULT_X0 = np.array(
    [67.7, 146.6, 90.2, 0.0, 33.8, 0.0, 67.7, 146.6, 22.6, 0.0, 13.5, 0.0]
)
DEFAULT_BSA_M2 = 1.80
DEFAULT_DT = 1e-4
DEFAULT_BEATS = 25
DEFAULT_SAMPLES_PER_BEAT = 1000


@dataclass
class CardioParams:
    """Full parameter record; timing values are in seconds.

    ``reference(HR=...)`` derives the chamber timing from the beat period;
    direct construction takes timing at face value.
    """

    EA_LA: float; EB_LA: float; V_U_LA: float
    EA_LV: float; EB_LV: float; V_U_LV: float
    EA_RA: float; EB_RA: float; V_U_RA: float
    EA_RV: float; EB_RV: float; V_U_RV: float
    R_min: float; R_max: float
    R_AR_SYS: float; C_AR_SYS: float; L_AR_SYS: float
    R_VEN_SYS: float; C_VEN_SYS: float; L_VEN_SYS: float
    R_AR_PUL: float; C_AR_PUL: float; L_AR_PUL: float
    R_VEN_PUL: float; C_VEN_PUL: float; L_VEN_PUL: float
    HR: float
    tC_LA: float; TC_LA: float; tR_LA: float; TR_LA: float
    tC_LV: float; TC_LV: float; tR_LV: float; TR_LV: float
    tC_RA: float; TC_RA: float; tR_RA: float; TR_RA: float
    tC_RV: float; TC_RV: float; tR_RV: float; TR_RV: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or (v < 0) or (v == 0 and not f.name.startswith("tC")):
                raise ValueError(f"parameter {f.name}={v} must be positive")

    @property
    def t_hb(self) -> float:
        return 60.0 / self.HR

    @classmethod
    def reference(cls, **overrides) -> "CardioParams":
        """Healthy-individual reference values, timing derived from HR."""
        vals = dict(REFERENCE_VALUES)
        for key, v in overrides.items():
            if key not in vals:
                raise KeyError(f"unknown parameter {key!r}")
            vals[key] = float(v)
        t_hb = 60.0 / vals["HR"]
        timing = {k: f * t_hb for k, f in TIMING_FRACTIONS.items()}
        timing["tR_LA"] = timing["tC_LA"] + timing["TC_LA"]
        timing["tR_LV"] = timing["tC_LV"] + timing["TC_LV"]
        timing["tR_RA"] = timing["tC_RA"] + timing["TC_RA"]
        timing["tR_RV"] = timing["tC_RV"] + timing["TC_RV"]
        return cls(**vals, **timing)

    def pack(self, r_vsd_resistance: float = 0.0) -> np.ndarray:
        theta = np.empty(N_THETA)
        for i, name in enumerate(_THETA_ORDER):
            theta[i] = getattr(self, name)
        theta[43] = r_vsd_resistance
        return theta

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj: dict) -> "CardioParams":
        return cls(**{f.name: float(obj[f.name]) for f in fields(cls)})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


def vsd_resistance(r_vsd_cm: float, r_min: float) -> float:
    """Septal-defect resistance from its radius by Poiseuille scaling of
    the open-valve resistance: R_min * (r_AV / r_VSD)^4."""
    if r_vsd_cm <= 0:
        raise ValueError("r_vsd_cm must be positive")
    return r_min * (AORTIC_ANNULUS_RADIUS_CM / r_vsd_cm) ** 4


def elastance_activation(t, tc, dtc, tr, dtr, t_hb):
    """Periodic contraction/relaxation ramp in [0, 1] (vectorized in t).

    Contraction branch takes precedence where windows overlap.
    """
    t = np.asarray(t, dtype=float)
    s = (t - tc) % t_hb
    s2 = (t - tr) % t_hb
    contract = 0.5 * (1.0 - np.cos(np.pi / dtc * np.minimum(s, dtc)))
    relax = 0.5 * (1.0 + np.cos(np.pi / dtr * np.minimum(s2, dtr)))
    return np.where(s < dtc, contract, np.where(s2 < dtr, relax, 0.0))


def chamber_pressures(params: CardioParams, t, states) -> dict[str, np.ndarray]:
    """Elastance pressures of the four chambers along a trajectory."""
    t_hb = params.t_hb
    out = {}
    for name, vol_idx in (("LA", 0), ("LV", 1), ("RA", 6), ("RV", 7)):
        e = elastance_activation(
            t,
            getattr(params, f"tC_{name}"), getattr(params, f"TC_{name}"),
            getattr(params, f"tR_{name}"), getattr(params, f"TR_{name}"),
            t_hb,
        )
        ea, eb = getattr(params, f"EA_{name}"), getattr(params, f"EB_{name}")
        vu = getattr(params, f"V_U_{name}")
        out[f"p_{name}"] = (eb + ea * e) * (states[..., vol_idx] - vu)
    return out


def valve_flux(dp, r_min, r_max):
    """Flow through a valve for pressure jump ``dp`` (vectorized)."""
    r = np.sqrt(r_max * r_min) * (r_max / r_min) ** (
        np.arctan(-100.0 * np.pi * np.asarray(dp, float)) / np.pi
    )
    return dp / r


def cardio_rhs(t: float, state, params: CardioParams, r_vsd_cm: float | None = None
               ) -> np.ndarray:
    """Time derivative of the 12-state system (reference implementation).

    The integration kernels inline this computation; this entry point
    exists for direct inspection and testing.
    """
    state = np.asarray(state, dtype=float)
    if not np.isfinite(state).all():
        raise IntegratorBlowup("non-finite state")
    p = chamber_pressures(params, t, state)
    q_mv = valve_flux(p["p_LA"] - p["p_LV"], params.R_min, params.R_max)
    q_av = valve_flux(p["p_LV"] - state[2], params.R_min, params.R_max)
    q_tv = valve_flux(p["p_RA"] - p["p_RV"], params.R_min, params.R_max)
    q_pv = valve_flux(p["p_RV"] - state[8], params.R_min, params.R_max)
    q_vsd = 0.0
    if r_vsd_cm is not None:
        q_vsd = (p["p_LV"] - p["p_RV"]) / vsd_resistance(r_vsd_cm, params.R_min)
    dx = np.empty(12)
    dx[0] = state[11] - q_mv
    dx[1] = q_mv - q_av - q_vsd
    dx[2] = (q_av - state[3]) / params.C_AR_SYS
    dx[3] = (-params.R_AR_SYS * state[3] + state[2] - state[4]) / params.L_AR_SYS
    dx[4] = (state[3] - state[5]) / params.C_VEN_SYS
    dx[5] = (-params.R_VEN_SYS * state[5] + state[4] - p["p_RA"]) / params.L_VEN_SYS
    dx[6] = state[5] - q_tv
    dx[7] = q_tv - q_pv + q_vsd
    dx[8] = (q_pv - state[9]) / params.C_AR_PUL
    dx[9] = (-params.R_AR_PUL * state[9] + state[8] - state[10]) / params.L_AR_PUL
    dx[10] = (state[9] - state[11]) / params.C_VEN_PUL
    dx[11] = (-params.R_VEN_PUL * state[11] + state[10] - p["p_LA"]) / params.L_VEN_PUL
    return dx


@dataclass
class CardioTrajectory:
    """Last-heartbeat time series on a uniform grid (endpoints included)."""

    t: np.ndarray  # absolute time, (n,)
    states: np.ndarray  # (n, 12) in STATE_NAMES order
    pressures: dict[str, np.ndarray]  # p_LA, p_LV, p_RA, p_RV
    fluxes: dict[str, np.ndarray]  # Q_MV, Q_AV, Q_TV, Q_PV (+ Q_VSD)
    periodicity: float  # max relative state change between last two beat starts
    params: CardioParams
    r_vsd_cm: float | None = None

    @property
    def n_samples(self) -> int:
        return self.t.shape[0]


PERIODICITY_WARN = 0.05


def simulate(
    params: CardioParams,
    r_vsd_cm: float | None = None,
    dt: float = DEFAULT_DT,
    beats: int = DEFAULT_BEATS,
    samples_per_beat: int = DEFAULT_SAMPLES_PER_BEAT,
    x0: np.ndarray | None = None,
    warn_nonperiodic: bool = True,
) -> CardioTrajectory:
    """Integrate to the periodic regime and return the last beat."""
    theta = params.pack(
        vsd_resistance(r_vsd_cm, params.R_min) if r_vsd_cm is not None else 0.0
    )
    out, starts = integrate_batch(
        theta[None, :],
        DEFAULT_X0 if x0 is None else np.asarray(x0, float),
        dt, beats, samples_per_beat,
    )
    return _trajectory_from_samples(params, r_vsd_cm, out[0], starts[0],
                                    beats, warn_nonperiodic)


def simulate_batch(
    thetas: np.ndarray,
    dt: float = DEFAULT_DT,
    beats: int = DEFAULT_BEATS,
    samples_per_beat: int = DEFAULT_SAMPLES_PER_BEAT,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw batched integration (packed parameter rows); see kernel docs."""
    return integrate_batch(
        np.asarray(thetas, float),
        DEFAULT_X0 if x0 is None else np.asarray(x0, float),
        dt, beats, samples_per_beat,
    )


def _trajectory_from_samples(
    params, r_vsd_cm, samples, starts, beats, warn_nonperiodic=True
) -> CardioTrajectory:
    if not np.isfinite(samples).all():
        raise IntegratorBlowup("integration produced non-finite state")
    vols = samples[:, [0, 1, 6, 7]]
    if vols.min() <= 0:
        raise IntegratorBlowup("a chamber volume reached zero")
    t_hb = params.t_hb
    n = samples.shape[0] - 1
    t = (beats - 1) * t_hb + np.arange(n + 1) * (t_hb / n)
    pressures = chamber_pressures(params, t, samples)
    fluxes = {
        "Q_MV": valve_flux(pressures["p_LA"] - pressures["p_LV"], params.R_min, params.R_max),
        "Q_AV": valve_flux(pressures["p_LV"] - samples[:, 2], params.R_min, params.R_max),
        "Q_TV": valve_flux(pressures["p_RA"] - pressures["p_RV"], params.R_min, params.R_max),
        "Q_PV": valve_flux(pressures["p_RV"] - samples[:, 8], params.R_min, params.R_max),
    }
    if r_vsd_cm is not None:
        fluxes["Q_VSD"] = (pressures["p_LV"] - pressures["p_RV"]) / vsd_resistance(
            r_vsd_cm, params.R_min
        )
    denom = np.maximum(np.abs(starts[1]), 1e-9)
    periodicity = float(np.max(np.abs(starts[1] - starts[0]) / denom)) if beats >= 2 else np.inf
    if warn_nonperiodic and periodicity > PERIODICITY_WARN:
        import warnings

        warnings.warn(
            f"trajectory not periodic: beat-to-beat change {periodicity:.1%}"
        )
    return CardioTrajectory(
        t=t, states=samples, pressures=pressures, fluxes=fluxes,
        periodicity=periodicity, params=params, r_vsd_cm=r_vsd_cm,
    )


# ---------------------------------------------------------------------------
# clinical output functionals

def save_trajectory_csv(path, traj: CardioTrajectory) -> None:
    """CSV export: time, the 12 states, chamber pressures, valve fluxes."""
    flux_names = ["Q_MV", "Q_AV", "Q_TV", "Q_PV"]
    if "Q_VSD" in traj.fluxes:
        flux_names.append("Q_VSD")
    press_names = ["p_LA", "p_LV", "p_RA", "p_RV"]
    header = ["t"] + STATE_NAMES + press_names + flux_names
    cols = [traj.t] + [traj.states[:, i] for i in range(len(STATE_NAMES))]
    cols += [traj.pressures[n] for n in press_names]
    cols += [traj.fluxes[n] for n in flux_names]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(f"{v:.10e}" for v in row) + "\n")


OUTPUT_NAMES = [
    "LA_I-Vmax", "LA_Pmax", "LA_Pmin", "LA_Pmean",
    "LV_SV", "CI", "LV_I-EDV", "LV_ESV", "LV_EF", "LV_Pmax", "LV_Pmin",
    "RA_Pmax", "RA_Pmin", "RA_Pmean",
    "RV_I-EDV", "RV_I-ESV", "RV_EF", "RV_Pmax", "RV_Pmin",
    "SAP_max", "SAP_min",
    "PAP_max", "PAP_min", "PAP_mean",
    "PWP_min", "PWP_mean",
    "SVR", "PVR",
]

EXTRA_OUTPUT_NAMES = ["LV_I-ESV", "Q_P", "Q_S"]


def cardio_outputs(
    traj: CardioTrajectory, params: CardioParams | None = None,
    bsa: float = DEFAULT_BSA_M2,
) -> dict[str, float]:
    """Named clinical outputs from one beat.

    Index-suffixed volumes are normalized by body surface area. Means use
    the uniform grid over exactly one period (the duplicate endpoint is
    dropped). Vascular resistances follow the standard clinical
    definitions: SVR from the systemic arterial/right atrial mean
    pressure drop over cardiac output, PVR from the pulmonary arterial
    mean pressure minus the mean left atrial (wedge) pressure; the wedge
    pressure series itself is taken from the pulmonary venous compartment.
    """
    params = params or traj.params
    if traj.n_samples < 3:
        raise EmptyTrajectory("trajectory too short for output extraction")
    n = traj.n_samples - 1  # one full period without the duplicate endpoint
    st = traj.states[:n]
    p_la = traj.pressures["p_LA"][:n]
    p_lv = traj.pressures["p_LV"][:n]
    p_ra = traj.pressures["p_RA"][:n]
    p_rv = traj.pressures["p_RV"][:n]
    p_as, p_ap, p_vp = st[:, 2], st[:, 8], st[:, 10]
    v_la, v_lv, v_rv = st[:, 0], st[:, 1], st[:, 7]

    sv = float(v_lv.max() - v_lv.min())
    edv = float(v_lv.max())
    co_l_min = sv * params.HR / 1000.0
    out = {
        "LA_I-Vmax": float(v_la.max()) / bsa,
        "LA_Pmax": float(p_la.max()),
        "LA_Pmin": float(p_la.min()),
        "LA_Pmean": float(p_la.mean()),
        "LV_SV": sv,
        "CI": co_l_min / bsa,
        "LV_I-EDV": edv / bsa,
        "LV_ESV": float(v_lv.min()),
        "LV_I-ESV": float(v_lv.min()) / bsa,
        "LV_EF": 100.0 * sv / edv,
        "LV_Pmax": float(p_lv.max()),
        "LV_Pmin": float(p_lv.min()),
        "RA_Pmax": float(p_ra.max()),
        "RA_Pmin": float(p_ra.min()),
        "RA_Pmean": float(p_ra.mean()),
        "RV_I-EDV": float(st[:, 7].max()) / bsa,
        "RV_I-ESV": float(st[:, 7].min()) / bsa,
        "RV_EF": 100.0 * float(v_rv.max() - v_rv.min()) / float(v_rv.max()),
        "RV_Pmax": float(p_rv.max()),
        "RV_Pmin": float(p_rv.min()),
        "SAP_max": float(p_as.max()),
        "SAP_min": float(p_as.min()),
        "PAP_max": float(p_ap.max()),
        "PAP_min": float(p_ap.min()),
        "PAP_mean": float(p_ap.mean()),
        "PWP_min": float(p_vp.min()),
        "PWP_mean": float(p_vp.mean()),
        "SVR": (float(p_as.mean()) - float(p_ra.mean())) / co_l_min,
        "PVR": (float(p_ap.mean()) - float(p_la.mean())) / co_l_min,
        "Q_P": float(traj.fluxes["Q_PV"][:n].mean()),
        "Q_S": float(traj.fluxes["Q_AV"][:n].mean()),
    }
    return out


def outputs_vector(out: dict[str, float], names: list[str]) -> np.ndarray:
    return np.array([out[n] for n in names])


# ---------------------------------------------------------------------------
# forward-model adapter for inverse problems


class CardioModel(ForwardModel):
    """Selected circulation outputs as a function of selected parameters.

    Varied parameters may be taken on log scale (the inverse problem then
    sees an unconstrained Gaussian while the simulator receives their
    exponentials). Changing ``HR`` rescales the chamber timing with the
    beat period; ``r_VSD`` (cm) is accepted as a varied name when the
    septal shunt is enabled.
    """

    def __init__(
        self,
        varied: list[str],
        observed: list[str],
        vsd: bool = False,
        log_scale: bool = True,
        r_vsd_cm: float | None = None,
        dt: float = DEFAULT_DT,
        beats: int = DEFAULT_BEATS,
        samples_per_beat: int = DEFAULT_SAMPLES_PER_BEAT,
        bsa: float = DEFAULT_BSA_M2,
        base_overrides: dict | None = None,
        chunk: int = 256,
    ):
        super().__init__(len(varied), len(observed), name="cardio")
        for v in varied:
            if v != "r_VSD" and v not in REFERENCE_VALUES:
                raise KeyError(f"unknown varied parameter {v!r}")
        if "r_VSD" in varied and not vsd:
            raise ValueError("varying r_VSD requires vsd=True")
        self.varied = list(varied)
        self.observed = list(observed)
        self.vsd = vsd
        self.log_scale = log_scale
        self.r_vsd_cm = r_vsd_cm if r_vsd_cm is not None else (
            0.6 * AORTIC_ANNULUS_RADIUS_CM if vsd else None
        )
        self.dt = dt
        self.beats = beats
        self.samples_per_beat = samples_per_beat
        self.bsa = bsa
        self.base_overrides = dict(base_overrides or {})
        self.chunk = chunk

    def reference_u(self) -> np.ndarray:
        """The reference point expressed in this model's parameter space."""
        vals = []
        for name in self.varied:
            if name == "r_VSD":
                vals.append(self.r_vsd_cm)
            else:
                vals.append(self.base_overrides.get(name, REFERENCE_VALUES[name]))
        vals = np.asarray(vals, dtype=float)
        return np.log(vals) if self.log_scale else vals

    def params_for(self, u: np.ndarray) -> tuple[CardioParams, float | None]:
        vals = np.exp(u) if self.log_scale else u
        over = dict(self.base_overrides)
        r_vsd = self.r_vsd_cm
        for name, v in zip(self.varied, vals):
            if name == "r_VSD":
                r_vsd = float(v)
            else:
                over[name] = float(v)
        return CardioParams.reference(**over), (r_vsd if self.vsd else None)

    def _eval_many(self, u_rows):
        ys = np.empty((u_rows.shape[0], self.O))
        for lo in range(0, u_rows.shape[0], self.chunk):
            hi = min(u_rows.shape[0], lo + self.chunk)
            plist, thetas = [], np.empty((hi - lo, N_THETA))
            for i, u in enumerate(u_rows[lo:hi]):
                params, r_vsd = self.params_for(u)
                plist.append((params, r_vsd))
                thetas[i] = params.pack(
                    vsd_resistance(r_vsd, params.R_min) if r_vsd is not None else 0.0
                )
            samples, starts = integrate_batch(
                thetas, DEFAULT_X0, self.dt, self.beats, self.samples_per_beat
            )
            for i, (params, r_vsd) in enumerate(plist):
                try:
                    traj = _trajectory_from_samples(
                        params, r_vsd, samples[i], starts[i], self.beats,
                        warn_nonperiodic=False,
                    )
                except IntegratorBlowup as exc:
                    raise ForwardFailure(
                        f"simulation failed for row {lo + i}: {exc}"
                    ) from exc
                ys[lo + i] = self._observe(traj, params)
        return ys

    def _observe(self, traj: CardioTrajectory, params: CardioParams) -> np.ndarray:
        out = cardio_outputs(traj, params, bsa=self.bsa)
        return outputs_vector(out, self.observed)


class CardioTrajectoryModel(CardioModel):
    """Equally spaced samples of all 12 states over the last heartbeat.

    Observation vector is state-major: the ``n_times`` samples of one
    state form a consecutive block (pairs with per-state-group noise
    construction, one variance per state). O = 12 * n_times.
    """

    def __init__(self, varied: list[str], n_times: int = 25, **kwargs):
        if kwargs.get("samples_per_beat", DEFAULT_SAMPLES_PER_BEAT) % n_times:
            raise ValueError("samples_per_beat must be divisible by n_times")
        observed = [f"{s}@{k}" for s in STATE_NAMES for k in range(n_times)]
        super().__init__(varied, observed, **kwargs)
        self.n_times = n_times

    def _observe(self, traj, params):
        stride = (traj.n_samples - 1) // self.n_times
        idx = np.arange(self.n_times) * stride
        return traj.states[idx].T.ravel()
