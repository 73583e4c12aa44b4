"""Discretization and selective-scan contracts against independent oracles."""

import numpy as np
import pytest
from scipy.integrate import quad

from scanseg import autodiff as ad
from scanseg import ssm
from scanseg.rng import Rng


class TestZohDiscretize:
    def test_small_a_limit(self):
        a_d, b_d = ssm.zoh_discretize(-1e-12, 2.0, 0.25)
        assert a_d == pytest.approx(1.0, abs=1e-10)
        assert b_d == pytest.approx(0.25 * 2.0, rel=1e-10)

    def test_quadrature_oracle(self):
        rng = Rng(41)
        for _ in range(100):
            a = -float(np.exp(rng.uniform((), -4, 2)))
            b = float(rng.normal())
            dt = float(np.exp(rng.uniform((), -4, 1)))
            a_d, b_d = ssm.zoh_discretize(a, b, dt)
            integral, _ = quad(lambda tau: np.exp(a * tau), 0.0, dt, epsabs=1e-13)
            assert a_d == pytest.approx(np.exp(a * dt), rel=1e-12)
            assert b_d == pytest.approx(integral * b, rel=1e-10, abs=1e-12)

    def test_steady_state_gain(self):
        _, b_d = ssm.zoh_discretize(-1.0, 1.0, 1e4)
        assert b_d == pytest.approx(1.0, rel=1e-12)

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValueError, match="dt"):
            ssm.zoh_discretize(-1.0, 1.0, 0.0)
        with pytest.raises(ValueError, match="dt"):
            ssm.zoh_discretize(-1.0, 1.0, -0.5)

    def test_series_branch_continuous(self):
        # straddle the |a*dt| = 1e-6 switch and compare the two branches
        dt = 1.0
        for a in (-1e-6 * (1 - 1e-9), -1e-6 * (1 + 1e-9)):
            _, b_d = ssm.zoh_discretize(a, 1.0, dt)
            exact = np.expm1(a * dt) / a
            assert b_d == pytest.approx(exact, rel=1e-9)
        lo = ssm.zoh_discretize(-1e-6 * (1 - 1e-9), 1.0, dt)[1]
        hi = ssm.zoh_discretize(-1e-6 * (1 + 1e-9), 1.0, dt)[1]
        assert abs(lo - hi) < 1e-9

    def test_array_broadcast(self):
        a = np.array([-1.0, -2.0])
        a_d, b_d = ssm.zoh_discretize(a, np.array([1.0, 1.0]), 0.5)
        np.testing.assert_allclose(a_d, np.exp(a * 0.5))


class TestNaiveRecurrence:
    def test_zero_drive(self):
        L, N = 6, 3
        y = ssm.ssm_recurrence_naive(np.full((L, N), 0.9), np.zeros((L, N)),
                                     np.ones((L, N)), np.ones(L))
        np.testing.assert_array_equal(y, np.zeros(L))

    def test_memoryless(self):
        x = np.array([3.0, -1.0, 2.0])
        y = ssm.ssm_recurrence_naive(np.zeros((3, 1)), np.ones((3, 1)),
                                     np.ones((3, 1)), x)
        np.testing.assert_array_equal(y, x)

    def test_geometric_decay(self):
        x = np.array([1.0, 0.0, 0.0])
        y = ssm.ssm_recurrence_naive(np.full((3, 1), 0.5), np.ones((3, 1)),
                                     np.ones((3, 1)), x)
        np.testing.assert_allclose(y, [1.0, 0.5, 0.25])

    def test_length_mismatch_rejected(self):
        with pytest.raises(Exception, match="length mismatch"):
            ssm.ssm_recurrence_naive(np.ones((3, 2)), np.ones((3, 2)),
                                     np.ones((3, 2)), np.ones(4))


def scan_vs_naive(seed, batch, channels, length, n_state):
    rng = Rng(seed)
    params = ssm.init_ssm_params(channels, n_state, rng.split("p"),
                                 param_cls=lambda d: np.asarray(d))
    x = rng.normal((batch, channels, length))
    y = ssm.selective_scan(x, params)
    a_d, b_d, ct = ssm.scan_coefficients(x, params)
    worst = 0.0
    for b in range(batch):
        for c in range(channels):
            want = ssm.ssm_recurrence_naive(a_d[b, :, c], b_d[b, :, c], ct[b],
                                            x[b, c])
            err = np.max(np.abs(y[b, c] - want) / np.maximum(np.abs(want), 1e-8))
            worst = max(worst, err)
    return worst


class TestSelectiveScan:
    def test_zero_input_zero_output(self):
        rng = Rng(50)
        params = ssm.init_ssm_params(3, 4, rng, param_cls=lambda d: np.asarray(d))
        y = ssm.selective_scan(np.zeros((2, 3, 8)), params)
        np.testing.assert_array_equal(y, np.zeros((2, 3, 8)))

    def test_matches_naive_recurrence(self):
        assert scan_vs_naive(seed=51, batch=2, channels=2, length=16, n_state=4) <= 1e-10

    def test_linearity_with_frozen_coefficients(self):
        rng = Rng(52)
        params = ssm.init_ssm_params(1, 4, rng.split("p"), param_cls=lambda d: np.asarray(d))
        carrier = rng.normal((1, 1, 12))
        a_d, b_d, ct = ssm.scan_coefficients(carrier, params)
        x1 = rng.normal((12,))
        x2 = rng.normal((12,))
        alpha, beta = 1.7, -0.4
        y1 = ssm.ssm_recurrence_naive(a_d[0, :, 0], b_d[0, :, 0], ct[0], x1)
        y2 = ssm.ssm_recurrence_naive(a_d[0, :, 0], b_d[0, :, 0], ct[0], x2)
        y12 = ssm.ssm_recurrence_naive(a_d[0, :, 0], b_d[0, :, 0], ct[0],
                                       alpha * x1 + beta * x2)
        np.testing.assert_allclose(y12, alpha * y1 + beta * y2, rtol=1e-10, atol=1e-12)

    def test_var_path_matches_ndarray_path(self):
        rng = Rng(53)
        params = ssm.init_ssm_params(3, 5, rng.split("p"))
        x = rng.normal((2, 3, 9))
        with ad.no_grad():
            y_plain = ssm.selective_scan(x, params)
        assert isinstance(y_plain, np.ndarray)
        y_var = ssm.selective_scan(ad.Var(x, requires_grad=True), params)
        assert isinstance(y_var, ad.Var)
        np.testing.assert_array_equal(ad.value_of(y_var), y_plain)

    def test_channel_mismatch_rejected(self):
        rng = Rng(54)
        params = ssm.init_ssm_params(3, 4, rng, param_cls=lambda d: np.asarray(d))
        with pytest.raises(Exception, match="C="):
            ssm.selective_scan(np.zeros((1, 2, 5)), params)

    def test_stability_long_horizon(self):
        # A < 0 and bounded input: state stays within the geometric bound
        rng = Rng(55)
        L, N = 100_000, 4
        dt = rng.uniform((L, 1), 0.01, 0.2)
        a = -np.exp(rng.uniform((1, N), -1, 1))
        a_d = np.exp(dt * a)
        b_d = dt * rng.uniform((L, N), -1, 1)
        x = rng.uniform((L,), -1, 1)
        bound = np.max(np.abs(b_d) * np.abs(x)[:, None]) / (1 - np.max(a_d))
        h = np.zeros(N)
        peak = 0.0
        for t in range(L):
            h = a_d[t] * h + b_d[t] * x[t]
            peak = max(peak, np.max(np.abs(h)))
        assert np.isfinite(peak) and peak <= bound + 1e-12

    def test_gradcheck_through_scan(self):
        rng = Rng(56)
        params = ssm.init_ssm_params(2, 3, rng.split("p"))
        x = ad.Parameter(rng.normal((1, 2, 6)))
        named = {"x": x, "a_log": params.a_log, "delta_bias": params.delta_bias,
                 "w_delta": params.w_delta, "w_b": params.w_b, "w_c": params.w_c}
        fn = lambda: ad.sum_(ad.silu(ssm.selective_scan(x, params)))
        report = ad.gradcheck(fn, named, tol=1e-6)
        assert report.passed, str(report)
