import math

import numpy as np
import pytest
from numba import njit

from vctrial.errors import NumericalBlowup
from vctrial.models import hovorka
from vctrial.simcore import (IntegrationDiagnostics, NoiseStream, ObservationNoise, Purpose,
                             SdeSystem, SimConfig, em_step, observe, simulate_control_interval,
                             wiener_increments)


@njit
def _decay(t, x, u, d, p):
    return -p[0] * x


@njit
def _zero(t, x, u, d, p):
    return np.zeros_like(x)


@njit
def _ident(t, x, p):
    return x[0]


def scalar_system(drift, sigma=0.0, mask=False):
    return SdeSystem("scalar", ("x",), drift, lambda t, x, u, d, p: np.array([sigma]),
                     _ident, _ident, np.array([mask]))


def py_decay(t, x, u, d, p):
    return -p[0] * x


class TestNoiseStream:
    def test_same_key_same_sequence(self):
        a = NoiseStream(7, 3, Purpose.PROCESS_NOISE).normal(10)
        b = NoiseStream(7, 3, Purpose.PROCESS_NOISE).normal(10)
        assert np.array_equal(a, b)

    def test_keys_are_independent(self):
        base = NoiseStream(7, 3, 0).normal(5)
        assert not np.array_equal(base, NoiseStream(7, 4, 0).normal(5))
        assert not np.array_equal(base, NoiseStream(7, 3, 1).normal(5))
        assert not np.array_equal(base, NoiseStream(8, 3, 0).normal(5))

    def test_sequence_independent_of_call_sizes(self):
        whole = NoiseStream(1, 2, 0).normal(10000)
        s = NoiseStream(1, 2, 0)
        parts = np.concatenate([s.normal(n) for n in (1, 4095, 3, 5000, 901)])
        assert np.array_equal(whole, parts)


class TestWienerIncrements:
    def test_variance_matches_dt(self):
        s = NoiseStream(11, 0, 0)
        assert wiener_increments(3, 0.5, s).shape == (3,)
        draws = wiener_increments(3 * 10**6, 0.5, s).reshape(-1, 3)
        var = draws.var(axis=0, ddof=1)
        assert np.all(np.abs(var - 0.5) < 0.005)

    def test_zero_dt_rejected(self):
        with pytest.raises(ValueError):
            wiener_increments(1, 0.0, NoiseStream(0))

    def test_reproducible(self):
        a = wiener_increments(2, 0.5, NoiseStream(5, 1, 0))
        b = wiener_increments(2, 0.5, NoiseStream(5, 1, 0))
        assert np.array_equal(a, b)


class TestEmStep:
    def test_linear_decay_single_step(self):
        sys_ = scalar_system(_decay)
        x1 = em_step(sys_, 0.0, [1.0], [0.0], [0.0], np.array([1.0]), 0.5, deterministic=True)
        assert x1[0] == 0.5

    def test_zero_drift_zero_noise_is_identity(self):
        sys_ = scalar_system(_zero)
        x = np.array([3.25])
        assert em_step(sys_, 0.0, x, [0.0], [0.0], np.zeros(1), 0.5, NoiseStream(0))[0] == 3.25

    def test_pure_noise_variance(self):
        # x_N - x_0 = c * sum of N increments; Var = c^2 N dt
        c, n_steps, dt, paths = 1.5, 10, 0.5, 100_000
        sys_ = scalar_system(_zero, sigma=c)
        cfg = SimConfig(step_size=dt, cgm_period=n_steps * dt, trial_duration=0.0)
        s = NoiseStream(3, 0, 0)
        ends = np.array([simulate_control_interval(sys_, 0.0, [0.0], [0.0], [0.0], np.zeros(1),
                                                   cfg, s)[0] for _ in range(paths)])
        var = ends.var(ddof=1)
        expected = c * c * n_steps * dt
        se = expected * math.sqrt(2.0 / (paths - 1))
        assert abs(var - expected) < 3 * se

    def test_python_drift_matches_compiled(self):
        p = np.array([0.3])
        a = scalar_system(_decay, sigma=0.7)
        b = scalar_system(py_decay, sigma=0.7)
        cfg = SimConfig(trial_duration=0.0)
        xa = simulate_control_interval(a, 0.0, [2.0], [0.0], [0.0], p, cfg, NoiseStream(4))
        xb = simulate_control_interval(b, 0.0, [2.0], [0.0], [0.0], p, cfg, NoiseStream(4))
        assert np.array_equal(xa, xb)

    def test_clamp_counts(self):
        sys_ = scalar_system(_zero, sigma=10.0, mask=True)
        diag = IntegrationDiagnostics()
        s = NoiseStream(9)
        x = np.array([0.0])
        for _ in range(50):
            x = em_step(sys_, 0.0, x, [0.0], [0.0], np.zeros(1), 0.5, s, diagnostics=diag)
            assert x[0] >= 0.0
        assert diag.clamp_activations > 0

    def test_blowup_raises(self):
        @njit
        def explode(t, x, u, d, p):
            return x * 1e300

        sys_ = scalar_system(explode)
        cfg = SimConfig(trial_duration=0.0)
        with pytest.raises(NumericalBlowup) as info:
            simulate_control_interval(sys_, 10.0, [1e10], [0.0], [0.0], np.zeros(1), cfg)
        assert info.value.index == 0
        assert 10.0 < info.value.t <= 15.0


class TestControlInterval:
    def test_ten_steps_equal_ten_em_steps(self):
        sys_ = scalar_system(_decay, sigma=0.4)
        p = np.array([0.1])
        cfg = SimConfig(trial_duration=0.0)
        assert cfg.steps_per_tick == 10
        a = simulate_control_interval(sys_, 0.0, [1.0], [0.0], [0.0], p, cfg, NoiseStream(2))
        s = NoiseStream(2)
        x = np.array([1.0])
        for i in range(10):
            x = em_step(sys_, 0.5 * i, x, [0.0], [0.0], p, 0.5, s)
        assert np.array_equal(a, x)

    def test_sink_sees_every_step(self):
        sys_ = scalar_system(_decay)
        seen = []
        simulate_control_interval(sys_, 5.0, [1.0], [0.0], [0.0], np.array([0.1]),
                                  SimConfig(trial_duration=0.0, deterministic=True),
                                  sink=lambda t, z: seen.append((t, z)))
        assert [t for t, _ in seen] == [5.0 + 0.5 * (i + 1) for i in range(10)]
        assert seen[-1][1] == pytest.approx(0.95 ** 10)

    def test_linear_system_close_to_exponential(self):
        dt = 0.5
        cfg = SimConfig(step_size=dt, trial_duration=0.0, deterministic=True)
        x = simulate_control_interval(scalar_system(_decay), 0.0, [1.0], [0.0], [0.0],
                                      np.array([1.0 / 5.0]), cfg)
        exact = math.exp(-1.0)
        assert abs(x[0] - exact) / exact < 2 * dt

    def test_meal_mass_over_interval(self):
        # D1 integrates A_G * d; with A_G = 1 and tau_D huge, D1 gain equals delivered mass.
        p = hovorka.HovorkaParams(
            tau_S=55, V_I=9.6, k_e=0.14, k_a1=0.0055, k_a2=0.0683, k_a3=0.0304, SIT=51.2,
            SID=8.2, SIE=520, A_G=1.0, tau_D=1e12, k_12=0.0649, EGP_0=1.288, F_01=0.776,
            V_G=12.0, BW=80.0).to_array()
        grams = 60.0
        rate = grams / 5.0  # delivered over one 5-minute interval
        x0 = np.zeros(11)
        x0[hovorka.Q1] = 72.0
        x = simulate_control_interval(hovorka.SYSTEM, 0.0, x0, [0.0], [rate], p,
                                      SimConfig(trial_duration=0.0, deterministic=True))
        assert x[hovorka.D1] == pytest.approx(grams, rel=1e-9)


class TestObserve:
    def test_zero_noise_is_exact(self):
        x = np.zeros(11)
        x[hovorka.G_I] = 6.0
        p = np.zeros(20)
        assert observe(hovorka.SYSTEM, 0.0, x, p, ObservationNoise(0.0)) == 6.0

    def test_noise_variance(self):
        x = np.zeros(11)
        x[hovorka.G_I] = 6.0
        s = NoiseStream(21, 0, Purpose.MEASUREMENT_NOISE)
        noise = ObservationNoise(0.1)
        ys = np.array([observe(hovorka.SYSTEM, 0.0, x, None, noise, s) for _ in range(100_000)])
        assert abs(ys.var(ddof=1) - 0.1) < 0.003

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            ObservationNoise(-1.0)


class TestSimConfig:
    def test_defaults(self):
        c = SimConfig()
        assert c.steps_per_tick == 10
        assert c.n_ticks == 52 * 7 * 288

    def test_period_must_be_multiple_of_step(self):
        with pytest.raises(ValueError):
            SimConfig(step_size=0.3, cgm_period=5.0)
