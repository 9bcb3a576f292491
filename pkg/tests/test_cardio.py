import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose

from uqvae.forward import cardio
from uqvae.forward.cardio import (
    CardioModel,
    CardioParams,
    cardio_outputs,
    cardio_rhs,
    elastance_activation,
    simulate,
    valve_flux,
    vsd_resistance,
)

# healthy-adult reference checks: echocardiographic range and the value the
# model is expected to reproduce (10% tolerance; integrator details differ)
REFERENCE_TABLE = {
    "LA_I-Vmax": (16, 34, 33.1),
    "LA_Pmax": (6, 20, 12.0),
    "LA_Pmin": (-2, 9, 8.1),
    "LA_Pmean": (4, 12, 10.9),
    "LV_SV": (30, 80, 67.6),
    "CI": (2.8, 4.2, 2.8),
    "LV_I-EDV": (50, 90, 66.0),
    "LV_ESV": (18, 52, 50.6),
    "LV_EF": (53, 73, 57.2),
    "LV_Pmax": (90, 140, 113.2),
    "LV_Pmin": (4, 12, 5.6),
    "RA_Pmax": (2, 14, 8.4),
    "RA_Pmin": (-2, 6, 5.7),
    "RA_Pmean": (-1, 8, 7.2),
    "RV_I-EDV": (44, 80, 65.8),
    "RV_I-ESV": (19, 46, 28.1),
    "RV_EF": (44, 71, 57.3),
    "RV_Pmax": (15, 28, 27.4),
    "RV_Pmin": (0, 8, 3.9),
    "SAP_max": (None, 140, 112.2),
    "SAP_min": (None, 80, 62.0),
    "PAP_max": (15, 28, 25.8),
    "PAP_min": (5, 16, 16.0),
    "PAP_mean": (10, 22, 20.6),
    "PWP_min": (1, 12, 11.2),
    "PWP_mean": (6, 15, 11.8),
    "SVR": (11.3, 17.5, 15.7),
    "PVR": (1.9, 3.1, 1.9),
}


@pytest.fixture(scope="module")
def reference_traj():
    return simulate(CardioParams.reference())


@pytest.fixture(scope="module")
def reference_outputs(reference_traj):
    return cardio_outputs(reference_traj)


class TestParams:
    def test_reference_timing_follows_beat_period(self):
        p = CardioParams.reference()
        t = p.t_hb
        assert t == pytest.approx(0.8)
        assert p.tC_LA == pytest.approx(0.79 * t)
        assert p.TC_LV == pytest.approx(0.35 * t)
        assert p.tR_LV == pytest.approx(p.tC_LV + p.TC_LV)
        assert p.TR_RA == pytest.approx(0.7 * t)

    def test_timing_rescales_with_heart_rate(self):
        p = CardioParams.reference(HR=100.0)
        assert p.t_hb == pytest.approx(0.6)
        assert p.tC_RA == pytest.approx(0.8 * 0.6)

    def test_json_roundtrip(self, tmp_path):
        p = CardioParams.reference(EA_LV=3.5)
        path = tmp_path / "params.json"
        p.save(path)
        import json

        loaded = CardioParams.from_json(json.loads(path.read_text()))
        assert loaded.EA_LV == 3.5
        assert loaded.tR_RV == p.tR_RV

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            CardioParams.reference(EA_LV=-1.0)
        with pytest.raises(KeyError):
            CardioParams.reference(unknown_param=1.0)


class TestValveAndElastance:
    def test_zero_pressure_jump_means_zero_flow(self):
        assert valve_flux(0.0, 0.0075, 75006.2) == 0.0

    def test_resistance_limits(self):
        r_min, r_max = 0.0075, 75006.2
        q = valve_flux(1e6, r_min, r_max)
        assert q * r_min == pytest.approx(1e6, rel=1e-3)  # open: R -> R_min
        q = valve_flux(-1e6, r_min, r_max)
        assert q * r_max == pytest.approx(-1e6, rel=1e-3)  # closed: R -> R_max

    def test_resistance_monotone_and_bounded(self):
        r_min, r_max = 0.0075, 75006.2
        dp = np.linspace(-0.5, 0.5, 201)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(dp != 0, dp / valve_flux(dp, r_min, r_max), np.nan)
        r = r[np.isfinite(r)]
        assert np.all(np.diff(r) < 0)
        assert r.min() >= r_min * 0.999 and r.max() <= r_max * 1.001

    def test_activation_ramp_endpoints(self):
        p = CardioParams.reference()
        t = p.t_hb
        e0 = elastance_activation(p.tC_LA, p.tC_LA, p.TC_LA, p.tR_LA, p.TR_LA, t)
        e1 = elastance_activation(
            p.tC_LA + p.TC_LA - 1e-12, p.tC_LA, p.TC_LA, p.tR_LA, p.TR_LA, t
        )
        assert e0 == pytest.approx(0.0, abs=1e-12)
        assert e1 == pytest.approx(1.0, abs=1e-6)
        # quiescent window between relaxation end and contraction onset
        mid = p.tR_LA + p.TR_LA + 0.25 * (p.tC_LA + t - p.tR_LA - p.TR_LA)
        assert elastance_activation(mid, p.tC_LA, p.TC_LA, p.tR_LA, p.TR_LA, t) == 0.0

    def test_rhs_conserves_total_blood_volume(self, rng):
        # chamber volumes plus compliance-stored volumes: the sum of the
        # corresponding derivative terms cancels exactly
        p = CardioParams.reference()
        for _ in range(10):
            state = np.abs(rng.standard_normal(12)) * 30 + 40
            dx = cardio_rhs(0.3, state, p)
            total = (
                dx[0] + dx[1] + dx[6] + dx[7]
                + p.C_AR_SYS * dx[2] + p.C_VEN_SYS * dx[4]
                + p.C_AR_PUL * dx[8] + p.C_VEN_PUL * dx[10]
            )
            assert abs(total) < 1e-9 * np.abs(dx).max()

    def test_rhs_vsd_also_conserves(self, rng):
        p = CardioParams.reference()
        state = np.abs(rng.standard_normal(12)) * 30 + 40
        dx = cardio_rhs(0.1, state, p, r_vsd_cm=0.9)
        total = (
            dx[0] + dx[1] + dx[6] + dx[7]
            + p.C_AR_SYS * dx[2] + p.C_VEN_SYS * dx[4]
            + p.C_AR_PUL * dx[8] + p.C_VEN_PUL * dx[10]
        )
        assert abs(total) < 1e-9 * np.abs(dx).max()

    def test_vsd_resistance_poiseuille_scaling(self):
        assert vsd_resistance(1.5, 0.0075) == pytest.approx(0.0075)
        assert vsd_resistance(0.75, 0.0075) == pytest.approx(0.0075 * 16)


class TestSimulation:
    def test_periodic_regime_reached(self, reference_traj):
        assert reference_traj.periodicity < 0.05

    def test_reference_outputs_inside_clinical_ranges(self, reference_outputs):
        for name, (lo, hi, _) in REFERENCE_TABLE.items():
            v = reference_outputs[name]
            assert hi is None or v <= hi, f"{name}={v} above {hi}"
            assert lo is None or v >= lo, f"{name}={v} below {lo}"

    def test_reference_outputs_match_expected_values(self, reference_outputs):
        for name, (_, _, value) in REFERENCE_TABLE.items():
            got = reference_outputs[name]
            assert abs(got - value) <= 0.10 * abs(value), (
                f"{name}: {got} vs {value}"
            )

    def test_volume_conservation_along_trajectory(self, reference_traj):
        p = reference_traj.params
        st = reference_traj.states
        total = (
            st[:, 0] + st[:, 1] + st[:, 6] + st[:, 7]
            + p.C_AR_SYS * st[:, 2] + p.C_VEN_SYS * st[:, 4]
            + p.C_AR_PUL * st[:, 8] + p.C_VEN_PUL * st[:, 10]
        )
        drift = (total.max() - total.min()) / total.mean()
        assert drift < 1e-3  # < 0.1% per beat

    def test_dt_halving_changes_outputs_below_half_percent(self, reference_outputs):
        traj = simulate(CardioParams.reference(), dt=5e-5)
        fine = cardio_outputs(traj)
        for name in cardio.OUTPUT_NAMES:
            rel = abs(fine[name] - reference_outputs[name]) / max(
                abs(reference_outputs[name]), 1e-12
            )
            assert rel < 0.005, f"{name}: {rel}"

    def test_states_stay_physical_for_nearby_draws(self):
        # +-25% parameter draws keep volumes positive and states finite
        rng = np.random.default_rng(42)
        names = [n for n in cardio.REFERENCE_VALUES if n != "R_max"]
        for i in range(50):
            over = {
                n: cardio.REFERENCE_VALUES[n] * rng.uniform(0.75, 1.25)
                for n in names
            }
            traj = simulate(CardioParams.reference(**over), dt=5e-4,
                            warn_nonperiodic=False)
            assert np.isfinite(traj.states).all()
            assert traj.states[:, [0, 1, 6, 7]].min() > 0

    def test_trajectory_time_grid_spans_last_beat(self, reference_traj):
        t = reference_traj.t
        assert t[0] == pytest.approx(24 * 0.8)
        assert t[-1] == pytest.approx(25 * 0.8)
        assert len(t) == 1001


class TestVsd:
    def test_reference_shunt_reverses_flow_balance(self):
        traj = simulate(CardioParams.reference(), r_vsd_cm=0.9)
        out = cardio_outputs(traj)
        assert out["Q_P"] / out["Q_S"] > 1.0

    def test_tiny_defect_matches_healthy_model(self, reference_outputs):
        traj = simulate(CardioParams.reference(), r_vsd_cm=0.01)
        out = cardio_outputs(traj)
        for name in cardio.OUTPUT_NAMES:
            rel = abs(out[name] - reference_outputs[name]) / max(
                abs(reference_outputs[name]), 1e-12
            )
            assert rel < 0.005, f"{name}: {rel}"

    def test_shunt_flux_reported(self):
        traj = simulate(CardioParams.reference(), r_vsd_cm=0.9)
        assert "Q_VSD" in traj.fluxes
        assert traj.fluxes["Q_VSD"].mean() > 0  # net left-to-right


class TestCardioModel:
    def test_eval_shapes_and_counter(self):
        model = CardioModel(["EA_LV", "HR"], ["CI", "LV_EF"], dt=1e-3,
                            samples_per_beat=200)
        u = np.log([[3.0391, 75.0], [3.5, 80.0]])
        before = model.call_count
        y = model.eval_many(u)
        assert y.shape == (2, 2)
        assert model.call_count - before == 2

    def test_log_scale_reference_point(self):
        model = CardioModel(["EA_LV", "HR"], ["CI"], dt=1e-3,
                            samples_per_beat=200)
        ref = model.reference_u()
        assert_allclose(np.exp(ref), [3.0391, 75.0])

    def test_hr_variation_changes_outputs(self):
        model = CardioModel(["HR"], ["CI", "SAP_max"], dt=1e-3,
                            samples_per_beat=200)
        lo = model.eval(np.log([65.0]))
        hi = model.eval(np.log([90.0]))
        assert hi[0] > lo[0]  # cardiac index rises with heart rate

    def test_unknown_names_rejected(self):
        with pytest.raises(KeyError):
            CardioModel(["NOPE"], ["CI"])
        with pytest.raises(ValueError):
            CardioModel(["r_VSD"], ["CI"], vsd=False)


class TestBackendEquivalence:
    def test_numpy_fallback_matches_active_backend(self):
        # short batched run through both code paths
        thetas = np.stack([
            CardioParams.reference().pack(0.0),
            CardioParams.reference(HR=90.0).pack(0.0),
            CardioParams.reference(EA_LV=2.5).pack(vsd_resistance(0.9, 0.0075)),
        ])
        from uqvae.forward.cardio_kernels import (
            _integrate_batch_numpy,
            integrate_batch,
            steps_per_beat,
        )

        out, starts = integrate_batch(thetas, cardio.DEFAULT_X0, 1e-3, 3, 100)
        nps = steps_per_beat(60.0 / thetas[:, 26].min(), 1e-3, 100)
        out_np, starts_np = _integrate_batch_numpy(
            thetas, cardio.DEFAULT_X0, nps, 3, 100
        )
        assert_allclose(out, out_np, rtol=1e-12, atol=1e-10)
        assert_allclose(starts, starts_np, rtol=1e-12, atol=1e-10)

    def test_env_flag_selects_numpy(self):
        code = (
            "import os; os.environ['UQVAE_BACKEND']='numpy';"
            "from uqvae.backend import selected_backend, use_numba;"
            "assert selected_backend() == 'numpy' and not use_numba()"
        )
        subprocess.run([sys.executable, "-c", code], check=True)


class TestFileInterfaces:
    def test_trajectory_csv_export(self, tmp_path, reference_traj):
        path = tmp_path / "traj.csv"
        cardio.save_trajectory_csv(path, reference_traj)
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header[0] == "t"
        assert header[1 : 13] == cardio.STATE_NAMES
        assert "p_LV" in header and "Q_AV" in header
        assert len(lines) == reference_traj.n_samples + 1
        row = [float(v) for v in lines[1].split(",")]
        assert row[0] == pytest.approx(reference_traj.t[0])

    def test_trajectory_csv_includes_shunt_flux(self, tmp_path):
        traj = simulate(CardioParams.reference(), r_vsd_cm=0.9, dt=1e-3,
                        samples_per_beat=100)
        path = tmp_path / "traj.csv"
        cardio.save_trajectory_csv(path, traj)
        assert "Q_VSD" in path.read_text().splitlines()[0].split(",")


class TestTrajectoryObservations:
    def test_state_major_blocks(self):
        model = cardio.CardioTrajectoryModel(
            ["EA_LV"], n_times=5, dt=1e-3, samples_per_beat=100
        )
        assert model.O == 60
        y = model.eval(np.log([3.0391]))
        traj = simulate(CardioParams.reference(), dt=1e-3, samples_per_beat=100)
        stride = 100 // 5
        expected = traj.states[np.arange(5) * stride].T.ravel()
        assert_allclose(y, expected, rtol=1e-12)

    def test_pairs_with_grouped_noise(self):
        from uqvae.bayes import noise_cov_from_dataset

        model = cardio.CardioTrajectoryModel(
            ["EA_LV", "HR"], n_times=5, dt=1e-3, samples_per_beat=100
        )
        clean = model.eval_many(np.log([[3.0391, 75.0], [3.2, 80.0]]))
        g = noise_cov_from_dataset(clean, eta=0.05,
                                   grouping="per_state_group", group_size=5)
        diag = np.diag(g.mat).reshape(12, 5)
        # one shared variance per state block
        assert np.all(diag == diag[:, :1])

    def test_times_must_divide_grid(self):
        with pytest.raises(ValueError):
            cardio.CardioTrajectoryModel(["EA_LV"], n_times=7,
                                         samples_per_beat=100)
