import dataclasses

import numpy as np
import pytest

from vctrial.errors import NoRootError
from vctrial.models import hovorka as h
from vctrial.population import mean_parameters
from vctrial.simcore import SimConfig, simulate_control_interval
from vctrial.units import mu_min_to_uh

DET = SimConfig(trial_duration=0.0, deterministic=True)


@pytest.fixture
def params():
    return mean_parameters("hovorka")


def simulate(x, u, p_arr, minutes, d=0.0):
    out = []
    for k in range(int(minutes // 5)):
        x = simulate_control_interval(h.SYSTEM, 5.0 * k, x, [u], [d], p_arr, DET)
        out.append(x)
    return np.array(out)


class TestDeriveKb:
    def test_zero_sensitivity(self, params):
        assert h.derive_kb(dataclasses.replace(params, SIT=0.0))[0] == 0.0

    def test_appendix_means(self, params):
        p = dataclasses.replace(params, SIT=51.2, k_a1=0.0055)
        assert h.derive_kb(p)[0] == pytest.approx(2.816e-5, rel=1e-12)

    def test_linear_in_sensitivity(self, params):
        doubled = dataclasses.replace(params, SIT=2 * params.SIT)
        assert h.derive_kb(doubled)[0] == pytest.approx(2 * h.derive_kb(params)[0], rel=1e-15)


class TestDrift:
    def test_origin(self, params):
        p = params.to_array()
        f = h.hovorka_drift(0.0, np.zeros(11), np.zeros(1), np.zeros(1), p)
        expected = np.zeros(11)
        expected[h.Q1] = params.EGP_0
        assert np.array_equal(f, expected)

    def test_renal_kink_continuous(self, params):
        p = params.to_array()
        x = np.zeros(11)
        at = []
        for G in (9.0 - 1e-12, 9.0, 9.0 + 1e-12):
            x[h.Q1] = G * params.V_G
            at.append(h.hovorka_drift(0.0, x, np.zeros(1), np.zeros(1), p)[h.Q1])
        assert at[1] == pytest.approx(at[0], abs=1e-9)
        assert at[2] == pytest.approx(at[1], abs=1e-9)

    def test_renal_clearance_above_threshold(self, params):
        p = params.to_array()
        x = np.zeros(11)
        x[h.Q1] = 9.0 * params.V_G
        base = h.hovorka_drift(0.0, x, np.zeros(1), np.zeros(1), p)[h.Q1]
        x[h.Q1] = 11.0 * params.V_G
        high = h.hovorka_drift(0.0, x, np.zeros(1), np.zeros(1), p)[h.Q1]
        # above 9 mmol/L only F_R changes: 0.003 (G - 9) V_G
        assert base - high == pytest.approx(0.003 * 2.0 * params.V_G, rel=1e-12)

    def test_consumption_kink_at_4_5(self, params):
        p = params.to_array()
        x = np.zeros(11)
        x[h.Q1] = 4.5 * params.V_G
        f_at = h.hovorka_drift(0.0, x, np.zeros(1), np.zeros(1), p)[h.Q1]
        x[h.Q1] = (4.5 - 1e-12) * params.V_G
        f_below = h.hovorka_drift(0.0, x, np.zeros(1), np.zeros(1), p)[h.Q1]
        assert f_at == pytest.approx(f_below, abs=1e-9)


class TestDiffusionAndOutputs:
    def test_diffusion_on_q1_only(self, params):
        s = h.hovorka_diffusion(params.to_array())
        assert s[h.Q1] == 1.5
        assert np.count_nonzero(s) == 1

    def test_deterministic_diffusion_zero(self, params):
        assert not h.hovorka_diffusion(params.to_array(), deterministic=True).any()

    def test_output_and_observe(self, params):
        p = params.to_array()
        x = np.zeros(11)
        x[h.Q1] = 6.0 * params.V_G
        x[h.G_I] = 5.5
        assert h.hovorka_output(0.0, x, p) == pytest.approx(6.0, rel=1e-15)
        assert h.hovorka_observe(0.0, x, p) == 5.5

    def test_cgm_lag_settles(self, params):
        x, u = h.hovorka_steady_state(params, 6.0)
        x = x.copy()
        x[h.G_I] = 9.0
        traj = simulate(x, u, params.to_array(), 10 * h.TAU_IG)
        assert traj[-1, h.G_I] == pytest.approx(6.0, rel=1e-3)


class TestSteadyState:
    def test_drift_vanishes(self, params):
        x, u = h.hovorka_steady_state(params, 6.0)
        f = h.hovorka_drift(0.0, x, np.array([u]), np.zeros(1), params.to_array())
        assert np.linalg.norm(f) < 1e-9
        assert x[h.Q1] / params.V_G == pytest.approx(6.0, rel=1e-14)

    def test_resimulation_holds_target(self, params):
        x, u = h.hovorka_steady_state(params, 6.0)
        traj = simulate(x, u, params.to_array(), 24 * 60)
        G = traj[:, h.Q1] / params.V_G
        assert np.max(np.abs(G - 6.0)) < 1e-6

    def test_more_egp_needs_more_insulin(self, params):
        _, u1 = h.hovorka_steady_state(params, 6.0)
        _, u2 = h.hovorka_steady_state(dataclasses.replace(params, EGP_0=2 * params.EGP_0), 6.0)
        assert u2 > u1

    def test_titration_oracle(self, params):
        # integral titration of the infusion onto G = 6 from a perturbed start
        x_ss, u_ss = h.hovorka_steady_state(params, 6.0)
        p = params.to_array()
        x = x_ss.copy()
        x[h.Q1] *= 1.3
        u = 0.5 * u_ss
        for k in range(8 * 288):
            G = x[h.Q1] / params.V_G
            u = max(u + 0.002 * (G - 6.0) * 5.0, 0.0)
            x = simulate_control_interval(h.SYSTEM, 5.0 * k, x, [u + 0.5 * (G - 6.0)], [0.0],
                                          p, DET)
        assert mu_min_to_uh(u) == pytest.approx(mu_min_to_uh(u_ss), rel=1e-3)

    def test_target_at_or_below_kink_rejected(self, params):
        with pytest.raises(ValueError):
            h.hovorka_steady_state(params, 4.0)

    def test_no_root(self, params):
        # an insulin-insensitive participant cannot be held at 6 mmol/L within the bracket
        p = dataclasses.replace(params, SIE=1e-6, SID=1e-6, SIT=1e-6)
        with pytest.raises(NoRootError):
            h.hovorka_steady_state(p, 6.0)


def test_validate_rejects_nonpositive(params):
    with pytest.raises(ValueError):
        dataclasses.replace(params, V_G=0.0).validate()
    with pytest.raises(ValueError):
        dataclasses.replace(params, A_G=1.3).validate()
