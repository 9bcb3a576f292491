"""Problem presets: the four benchmark scenarios and their defaults.

Each preset bundles a forward model, a prior, noise construction rules,
and normalization conventions. The circulation scenarios work on the
logarithms of their positive parameters (the simulator exponentiates),
with prior variances derived from the sensitivity-analysis ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bayes import GaussianModel, log_range_prior
from .errors import ConfigError
from .forward import ForwardModel, exp_map
from .forward.cardio import (
    GSA_PARAM_NAMES,
    REFERENCE_VALUES,
    CardioModel,
)
from .forward.poisson import PoissonModel, PoissonSetup, poisson_prior
from .linalg import SPDMatrix

PRESETS = ("exp", "poisson", "cardio", "cardio_vsd")

# observation sets, as selected by the sensitivity screening
HYPERTENSION_OBSERVED = ["CI", "LV_I-ESV", "LV_EF", "LV_Pmax", "SAP_max", "SAP_min"]
HYPERTENSION_VARIED = ["EA_LV", "R_AR_SYS", "C_AR_SYS", "R_VEN_SYS", "HR"]

VSD_OBSERVED = [
    "LV_Pmax", "LV_Pmin", "RA_Pmean", "RV_Pmax", "RV_Pmin",
    "SAP_max", "SAP_min", "PAP_max", "PAP_min", "PAP_mean",
    "PWP_mean", "PVR", "Q_P", "Q_S",
]
VSD_VARIED = [
    "EB_LV", "EA_RV", "EB_RV", "R_AR_SYS", "C_AR_SYS", "R_VEN_SYS",
    "R_AR_PUL", "r_VSD", "HR",
]

BASE_SPREAD = 0.25  # individual variability around the reference values

# scenario-specific widening of one bound (sign picks the bound), applied
# on top of the +-25% band
HYPERTENSION_RANGE_MODS = {
    "EA_LV": +0.40, "V_U_LV": -0.10, "R_AR_SYS": +0.50, "C_AR_SYS": -0.40,
    "R_VEN_SYS": +0.05, "C_VEN_SYS": -0.05, "R_AR_PUL": +0.10,
    "C_AR_PUL": -0.10, "HR": +0.10,
}


def range_fractions(names: list[str], mods: dict[str, float] | None = None
                    ) -> np.ndarray:
    """[low, high] multiplicative range per parameter name."""
    mods = mods or {}
    out = np.empty((len(names), 2))
    for i, name in enumerate(names):
        lo, hi = 1.0 - BASE_SPREAD, 1.0 + BASE_SPREAD
        m = mods.get(name, 0.0)
        if m > 0:
            hi += m
        elif m < 0:
            lo += m  # m is negative: widen the lower bound
        out[i] = (lo, hi)
    return out


def gsa_ranges(scenario: str) -> tuple[list[str], np.ndarray]:
    """Absolute hypercube ranges for the screening analysis."""
    if scenario == "hypertension":
        names = list(GSA_PARAM_NAMES)
        fracs = range_fractions(names, HYPERTENSION_RANGE_MODS)
        refs = np.array([REFERENCE_VALUES[n] for n in names])
    elif scenario == "vsd":
        names = list(GSA_PARAM_NAMES) + ["r_VSD"]
        fracs = range_fractions(names)
        refs = np.array([REFERENCE_VALUES[n] for n in GSA_PARAM_NAMES] + [0.9])
    else:
        raise ConfigError(f"unknown GSA scenario {scenario!r}")
    return names, refs[:, None] * fracs


@dataclass
class Problem:
    """A fully constructed inverse problem at original scale."""

    name: str
    forward: ForwardModel
    prior: GaussianModel
    normalization_mode: str
    noise_grouping: str
    noise_group_size: Optional[int] = None
    known_map: bool = False  # decoder stage unnecessary (true map available)
    oracle_uses_surrogate: bool = False
    varied_names: list[str] = field(default_factory=list)
    observed_names: list[str] = field(default_factory=list)

    @property
    def dim_params(self) -> int:
        return self.forward.D

    @property
    def dim_obs(self) -> int:
        return self.forward.O


def exp_problem(dim: int = 10) -> Problem:
    prior = GaussianModel(np.full(dim, -3.0), SPDMatrix(4.0 * np.eye(dim)))
    return Problem(
        name="exp",
        forward=exp_map(dim),
        prior=prior,
        normalization_mode="global_scalar",
        noise_grouping="per_component",
        known_map=True,
    )


def poisson_problem(
    n: int = 9, n_obs: int = 20, gamma: float = 0.1, delta: float = 0.5,
    xi: float = 1.5, beta: float | None = None, obs_seed: int = 0,
) -> Problem:
    setup = PoissonSetup(n=n, n_obs=n_obs, gamma=gamma, delta=delta,
                         xi=xi, beta=beta, obs_seed=obs_seed)
    model = PoissonModel(setup)
    prior = poisson_prior(setup, model.assembly)
    return Problem(
        name="poisson",
        forward=model,
        prior=prior,
        normalization_mode="global_scalar",
        noise_grouping="per_state_group",
        noise_group_size=n_obs,  # one pooled noise level across all points
    )


def cardio_problem(
    vsd: bool = False,
    dt: float = 1e-4,
    beats: int = 25,
    samples_per_beat: int = 1000,
    bsa: float = 1.80,
) -> Problem:
    if vsd:
        varied, observed = VSD_VARIED, VSD_OBSERVED
        fracs = range_fractions(varied)
        refs = np.array(
            [0.9 if n == "r_VSD" else REFERENCE_VALUES[n] for n in varied]
        )
    else:
        varied, observed = HYPERTENSION_VARIED, HYPERTENSION_OBSERVED
        fracs = range_fractions(varied, HYPERTENSION_RANGE_MODS)
        refs = np.array([REFERENCE_VALUES[n] for n in varied])
    model = CardioModel(
        varied, observed, vsd=vsd, log_scale=True,
        dt=dt, beats=beats, samples_per_beat=samples_per_beat, bsa=bsa,
    )
    prior = log_range_prior(refs, fracs[:, 0], fracs[:, 1])
    return Problem(
        name="cardio_vsd" if vsd else "cardio",
        forward=model,
        prior=prior,
        normalization_mode="per_component",
        noise_grouping="per_component",
        oracle_uses_surrogate=True,  # the true map is too costly to sample
        varied_names=varied,
        observed_names=observed,
    )


def build_problem(preset: str, options: dict | None = None) -> Problem:
    options = dict(options or {})
    if preset == "exp":
        return exp_problem(**options)
    if preset == "poisson":
        return poisson_problem(**options)
    if preset == "cardio":
        return cardio_problem(vsd=False, **options)
    if preset == "cardio_vsd":
        return cardio_problem(vsd=True, **options)
    raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
