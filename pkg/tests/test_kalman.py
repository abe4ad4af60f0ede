import math

import numpy as np
import pytest

from rmlosp.kalman import (FilterError, FilterState, NotStableError, asymptotic_objective, are_derivatives,
                           are_gradient, covariance_step, dre_fixed_point, filter_step, integrate_dre,
                           lyapunov_residual, solve_are, solve_lyapunov)
from rmlosp.signal import SignalState, kernel_for, make_kernel, observe, step_signal
from rmlosp.spectral import SensorArray, assemble_system

from conftest import SIM1_START, scalar_system, sim1_truth

ROOT2 = -1.0 + math.sqrt(2.0)


def test_no_observation_information_leaves_prediction():
    s = scalar_system(c=0.0)
    k = make_kernel(s.A, s.B, s.Q, 0.01)
    fs, inn = filter_step(FilterState(0.0, np.array([0.4]), np.array([[0.3]])), s, k, np.array([5.0]))
    np.testing.assert_allclose(fs.m, inn.m_pred)
    np.testing.assert_allclose(fs.S, inn.S_pred)


def test_scalar_recursion_converges_to_root():
    s = scalar_system()
    k = make_kernel(s.A, s.B, s.Q, 1e-3)
    S = np.zeros((1, 1))
    for _ in range(20_000):
        S = covariance_step(S, s, k)
    # Lie-splitting fixed point is O(dt) away from the continuous root
    assert S[0, 0] == pytest.approx(ROOT2, abs=1e-3)


def test_noiseless_constant_state_is_recovered():
    s = scalar_system(a=-1e-12, q=0.0, r=1e-2)
    k = make_kernel(s.A, s.B, s.Q, 0.01)
    fs = FilterState(0.0, np.zeros(1), np.eye(1))
    truth = 1.5
    errs = []
    for _ in range(2000):
        fs, _ = filter_step(fs, s, k, np.array([truth]))
        errs.append(abs(fs.m[0] - truth))
    assert np.all(np.diff(errs) <= 1e-15) and errs[-1] < 1e-3


def test_singular_innovation_covariance_raises():
    s = scalar_system(r=0.0)
    k = make_kernel(s.A, s.B, np.zeros((1, 1)), 0.01)
    with pytest.raises(FilterError):
        filter_step(FilterState(0.0, np.zeros(1), np.zeros((1, 1))), s, k, np.zeros(1))


@pytest.mark.parametrize("method", ["newton", "fixed_point"])
def test_scalar_are(method):
    ss = solve_are(scalar_system(), method=method)
    assert abs(ss.Sinf[0, 0] - ROOT2) < 1e-10


def test_are_without_observations_is_lyapunov(sim1_system):
    s = sim1_system
    import copy

    s0 = copy.copy(s)
    s0.C = np.zeros_like(s.C)
    P = solve_lyapunov(s.A, s.B @ s.Q @ s.B.T)
    np.testing.assert_allclose(solve_are(s0).Sinf, P, atol=1e-13)


def test_sim1_are_residual_and_psd(sim1_system):
    ss = solve_are(sim1_system)
    assert ss.residual < 1e-8
    assert np.linalg.eigvalsh(ss.Sinf).min() > -1e-12


def test_are_restart_invariance(sim1_system):
    rng = np.random.default_rng(0)
    sols = []
    for _ in range(2):
        X = rng.normal(size=(21, 21)) * 0.05
        sols.append(solve_are(sim1_system, method="fixed_point", S0=X @ X.T, dt=1e-2, tol=1e-12).Sinf)
    assert np.linalg.norm(sols[0] - sols[1]) < 1e-8


def test_dre_fixed_point_matches_are(sim1_system):
    ref = solve_are(sim1_system).Sinf
    fp = dre_fixed_point(sim1_system, dt=1e-3)
    assert np.linalg.norm(fp.midpoint - ref) < 1e-6
    # the raw posterior fixed point carries the first-order splitting error
    assert np.linalg.norm(fp.posterior - ref) > np.linalg.norm(fp.midpoint - ref)
    assert np.linalg.norm(integrate_dre(sim1_system, np.zeros((21, 21)), 60.0) - ref) < 1e-8


def test_lyapunov_examples():
    np.testing.assert_allclose(solve_lyapunov(-np.eye(3), 2 * np.eye(3)), np.eye(3), atol=1e-14)
    np.testing.assert_array_equal(solve_lyapunov(-np.eye(3), np.zeros((3, 3))), np.zeros((3, 3)))
    with pytest.raises(NotStableError, match="eigenvalue 1"):
        solve_lyapunov(np.diag([1.0, -2.0]), np.eye(2))


def test_lyapunov_routes_agree_and_residual(sim1_system):
    s = sim1_system
    W = s.B @ s.Q @ s.B.T
    F = s.A - solve_are(s).Sinf @ s.C.T @ np.linalg.inv(s.R) @ s.C
    K1 = solve_lyapunov(F, W, "schur")
    K2 = solve_lyapunov(F, W, "kron")
    assert np.linalg.norm(K1 - K2) < 1e-12 * (1 + np.linalg.norm(K1))
    for K in (K1, K2):
        assert lyapunov_residual(F, K, W) < 1e-10 * (1 + np.linalg.norm(K))
        assert np.linalg.eigvalsh(K).min() > -1e-14


def test_asymptotic_objective_zero_weight(ks21):
    sensors = SensorArray(np.array(SIM1_START) / 12)
    assert asymptotic_objective(sim1_truth(), sensors, ks21, M=np.zeros((21, 21))) == 0.0


def test_adding_a_sensor_never_hurts(ks21):
    rng = np.random.default_rng(1)
    th = sim1_truth()
    for _ in range(20):
        pos = rng.random((4, 2))
        base = asymptotic_objective(th, SensorArray(pos), ks21)
        more = asymptotic_objective(th, SensorArray(np.vstack([pos, rng.random((1, 2))])), ks21)
        assert more <= base + 1e-12


def test_are_sensitivities_match_fd(ks21):
    th = sim1_truth()
    pos = np.array(SIM1_START[:4]) / 12
    sensors = SensorArray(pos, movable=[True, False, True, False])
    s = assemble_system(th, sensors, ks21)
    dS = are_derivatives(s)
    p = len(s.theta_names)
    for j, nm in enumerate(s.theta_names[:9]):
        h = 1e-6 * max(1.0, abs(th.get(nm)))
        fp = solve_are(assemble_system(th.replace(**{nm: th.get(nm) + h}), sensors, ks21, active=[])).Sinf
        fm = solve_are(assemble_system(th.replace(**{nm: th.get(nm) - h}), sensors, ks21, active=[])).Sinf
        fd = (fp - fm) / (2 * h)
        assert np.linalg.norm(dS[j] - fd) < 1e-5 * np.linalg.norm(fd), nm
    val, g = are_gradient(s)
    for c, (i, a) in enumerate(sensors.movable_coords):
        vals = []
        for sg in (1, -1):
            q = pos.copy()
            q[i, a] += sg * 1e-6
            vals.append(asymptotic_objective(th, sensors.with_positions(q), ks21))
        fd = (vals[0] - vals[1]) / 2e-6
        assert abs(g[c] - fd) < 1e-5 * abs(fd)
        assert abs(np.trace(dS[p + c]) - fd) < 1e-5 * abs(fd)


def test_covariance_stays_symmetric_psd(sim1_system):
    s = sim1_system
    k = kernel_for(s, 0.002, derivatives=False)
    rng = np.random.default_rng(2)
    fs = FilterState(0.0, np.zeros(21), np.eye(21) * 0.01)
    sig = SignalState(0.0, np.zeros(21))
    worst = 0.0
    for i in range(5000):
        sig = step_signal(sig, k, rng)
        fs, _ = filter_step(fs, s, k, observe(sig, s, 0.002, rng).z)
        if i % 50 == 0:
            worst = min(worst, np.linalg.eigvalsh(fs.S).min())
        assert np.array_equal(fs.S, fs.S.T)
    assert worst > -1e-10
