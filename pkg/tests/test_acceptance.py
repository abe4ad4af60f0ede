"""End-to-end acceptance suite.

Each test prints one ``ACCEPTANCE <n>: PASS|FAIL`` line and the lines are
repeated in the pytest terminal summary. Run directly with
``python tests/test_acceptance.py`` to get only the nine lines.
"""

import math
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from rmlosp.conditions import (build_joint_system, check_A_stable, check_detectable,  # noqa: E402
                               check_joint_stable_and_stationary, check_stabilisable, condition_report)
from rmlosp.experiments import (_params, heatmap_objective, nearest_target_distance, optimal_placement,  # noqa: E402
                                gradient_check, prepare, preset, run_experiment, run_trial, trial_average)
from rmlosp.kalman import FilterState, dre_fixed_point, filter_step, solve_are  # noqa: E402
from rmlosp.optimizer import LearningSchedule, schedule_validate, torus_distance, tracking_mode  # noqa: E402
from rmlosp.signal import (ParameterSchedule, kernel_for, make_kernel, simulate,  # noqa: E402
                           stationary_covariance)
from rmlosp.spectral import SensorArray, assemble_system, build_truncation  # noqa: E402

from conftest import SIM1_START, scalar_system, sim1_truth  # noqa: E402

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str, elapsed: float, budget: float | None = None):
    within = budget is None or elapsed < budget
    status = "PASS" if ok and within else "FAIL"
    timing = f"{elapsed:.0f}s" + (f" (budget {budget:.0f}s)" if budget else "")
    RESULTS[n] = f"ACCEPTANCE {n}: {status} | {detail} | {timing}"
    print(RESULTS[n], flush=True)
    assert ok, RESULTS[n]
    assert within, RESULTS[n]


def test_1_gradient_fidelity():
    t0 = time.time()
    checks = gradient_check(preset("sim1a"), steps=500)
    th = [c for c in checks if c.name.startswith("theta:")]
    o = [c for c in checks if c.name.startswith("o:")]
    ok = all(c.passed for c in checks)
    worst_th = max(c.rel_error for c in th)
    worst_o = max(c.rel_error for c in o)
    report(1, ok, f"{len(th)} theta coords worst rel err {worst_th:.1e} (<1e-3); "
                  f"{len(o)} placement coords worst {worst_o:.1e} (<1e-4)", time.time() - t0, 300)


def test_2_riccati():
    t0 = time.time()
    scalar = solve_are(scalar_system()).Sinf[0, 0]
    e_scalar = abs(scalar - (math.sqrt(2) - 1))
    sys1 = assemble_system(sim1_truth(), SensorArray(np.array(SIM1_START) / 12), build_truncation(21))
    ss = solve_are(sys1)
    fp = dre_fixed_point(sys1, dt=1e-3)
    e_mid = np.linalg.norm(fp.midpoint - ss.Sinf)
    e_post = np.linalg.norm(fp.posterior - ss.Sinf)
    ok = e_scalar < 1e-10 and ss.residual < 1e-8 and e_mid < 1e-6
    report(2, ok, f"scalar err {e_scalar:.1e}; Sim I residual {ss.residual:.1e}; recursion fixed point "
                  f"(half-step centred) {e_mid:.1e} from ARE [uncentred posterior {e_post:.1e}]",
           time.time() - t0, 60)


def _simulate_joint(js, dt, steps, rng, chunk=20_000):
    kern = make_kernel(js.Phi, js.Psi, js.T, dt)
    L = kern.sampling_factor()
    Phi = kern.Phi
    d = js.d
    x = np.zeros(d)
    for _ in range(int(20 / dt)):  # burn-in of 20 time units
        x = Phi @ x + L @ rng.standard_normal(d)
    acc = np.zeros((d, d))
    out = np.empty((chunk, d))
    for _ in range(steps // chunk):
        xi = rng.standard_normal((chunk, d)) @ L.T
        for i in range(chunk):
            x = Phi @ x + xi[i]
            out[i] = x
        acc += out.T @ out
    return acc / (steps // chunk * chunk)


def test_3_stationary_law():
    t0 = time.time()
    ks = build_truncation(21)
    sensors = SensorArray(np.array(SIM1_START) / 12, movable=[True] + [False] * 7)
    sys1 = assemble_system(sim1_truth(), sensors, ks, active=["rho0", "sigma2", "zeta"])
    js = build_joint_system(sys1)
    st = check_joint_stable_and_stationary(js)
    emp = _simulate_joint(js, 0.05, 1_000_000, np.random.default_rng(31))
    rel = np.linalg.norm(emp - st.Kinf) / np.linalg.norm(st.Kinf)

    rep = {e.name: e for e in condition_report(assemble_system(sim1_truth(), SensorArray(np.array(SIM1_START) / 12),
                                                               ks), include_tangents=False).entries}
    sim1_ok = all(rep[k].passed for k in ("A_stable", "stabilisable", "detectable", "joint_Phi_stable"))
    A = np.diag([1.0, -2.0])
    counter_ok = (not check_A_stable(A).passed
                  and not check_detectable(A, np.array([[0.0, 1.0]])).passed
                  and check_detectable(A, np.array([[1.0, 0.0]])).passed
                  and not check_stabilisable(A, np.array([[0.0], [1.0]])).passed)
    ok = st.check.passed and rel < 0.05 and sim1_ok and counter_ok
    report(3, ok, f"joint d={js.d}, 1e6 steps: MC vs Lyapunov rel Frobenius {rel:.3f} (<0.05); "
                  f"sim1a stability/PBH {'pass' if sim1_ok else 'FAIL'}; diag(1,-2) counterexamples "
                  f"{'detected' if counter_ok else 'MISSED'}; controllability {rep['controllable'].evidence}",
           time.time() - t0, 300)


def test_4_simulation_one():
    t0 = time.time()
    cfg = preset("sim1a")
    st = prepare(cfg)
    log = run_trial(cfg, setup=st)
    truth = cfg.truth
    misses = []
    for nm in cfg.active:
        est, tv = log.final_theta[nm], truth[nm]
        if abs(est - tv) > max(0.2 * abs(tv), 0.05):
            misses.append(f"{nm} {est:.3g} vs {tv:.3g}")
    dist = nearest_target_distance(log.final_positions, cfg.targets)

    theta_true = _params(truth)
    placed, _ = optimal_placement(theta_true, st.sensors0.with_movable_positions(np.array(cfg.targets)), st.ks,
                                  st.M, B=st.B)
    w = cfg.mse_window
    base = run_trial(cfg, setup=st, theta_fixed=theta_true, positions=placed.positions, learn_theta=False,
                     learn_o=False)
    init = run_trial(cfg, setup=st, theta_fixed=theta_true, learn_theta=False, learn_o=False)
    mse, mse_opt, mse_init = (float(np.mean(lg.mse_full[-w:])) for lg in (log, base, init))
    gap = abs(mse - mse_opt) / mse_opt
    ok = not misses and dist.max() < 0.05 and gap < 0.10
    report(4, ok, f"params outside band: {', '.join(misses) or 'none'}; sensor-target distance max "
                  f"{dist.max():.3f} (<0.05); MSE learned {mse:.4f} vs oracle {mse_opt:.4f} (gap {gap:.1%}, "
                  f"<10%); oracle below initial placement {mse_init:.4f}: {mse_opt < mse_init}",
           time.time() - t0, 600)


def test_5_simulation_two():
    t0 = time.time()
    cfg = preset("sim2")
    ks = build_truncation(cfg.n)
    sensors = SensorArray(cfg.sensors.positions, movable=cfg.sensors.movable)
    centre = np.array([0.5, 0.5])
    dists = []
    for rho in (0.03, 0.10, 0.15, 0.20):
        hm = heatmap_objective(_params(dict(cfg.truth, rho0=rho)), sensors, ks)
        dists.append(float(torus_distance(hm.argmin, centre)))
    ordered = all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))
    target = np.array(heatmap_objective(_params(cfg.truth), sensors, ks).argmin)
    log = run_trial(cfg)
    rho_end = log.final_theta["rho0"]
    pos = log.final_positions[-1]
    d_end = float(torus_distance(pos, target))
    ok = ordered and abs(rho_end - 0.3) < 0.05 and d_end < 0.08
    report(5, ok, f"argmin-to-centre {', '.join(f'{d:.3f}' for d in dists)} non-increasing: {ordered}; "
                  f"rho0 end {rho_end:.3f} (0.3 +- 0.05); sensor end ({pos[0]:.3f}, {pos[1]:.3f}) is {d_end:.3f} "
                  f"from argmin (<0.08); rates rho0 {cfg.theta_rates['rho0'].gamma0:g}t^-0.55, "
                  f"o {cfg.o_rate.gamma0:g}t^-0.51", time.time() - t0, 900)


def test_6_simulation_four():
    t0 = time.time()
    cfg = preset("sim4")
    log = run_trial(cfg)
    th = log.final_theta
    b = (th["beta_1"], th["beta_2"])
    tau = (th["tau2_1"], th["tau2_2"], th["tau2_3"])
    bias_ok = abs(b[0]) <= 0.1 and abs(b[1] - 2.0) <= 0.1
    order_ok = tau[0] < tau[1] < tau[2]
    band_ok = all(abs(e - v) <= 0.5 * v for e, v in zip(tau, (0.01, 0.03, 0.10)))
    report(6, bias_ok and order_ok and band_ok,
           f"bias ({b[0]:.3f}, {b[1]:.3f}) vs (0, 2) +- 0.1; tau2 ({tau[0]:.4f}, {tau[1]:.4f}, {tau[2]:.4f}) "
           f"ordered: {order_ok}, within 50%: {band_ok}", time.time() - t0, 600)


def test_7_simulation_five():
    t0 = time.time()
    cfg = preset("sim5")
    logs = run_experiment(cfg)
    avg = trial_average(logs)
    pos = avg.o_mean[-1]
    c = 5 / 12
    d = float(np.hypot(*(pos - c)))
    ok = d < 0.15 and pos[0] <= c and pos[1] <= c
    # where the stationary objective actually bottoms out at the true parameters
    st = prepare(cfg)
    start = st.sensors0.with_movable_positions([[c, c]])
    opt = optimal_placement(_params(cfg.truth), start, st.ks, st.M, B=st.B)[0].movable_positions[0]
    report(7, ok, f"{len(logs)} trials, mean final sensor ({pos[0]:.3f}, {pos[1]:.3f}) +- "
                  f"({avg.o_se[-1][0]:.3f}, {avg.o_se[-1][1]:.3f}); distance to (5/12, 5/12) {d:.3f} (<0.15); "
                  f"south-west: {pos[0] <= c and pos[1] <= c}; objective minimiser at truth "
                  f"({opt[0]:.3f}, {opt[1]:.3f})", time.time() - t0, 1200)


def test_8_filter_calibration():
    t0 = time.time()
    ks = build_truncation(21)
    th = sim1_truth()
    sensors = SensorArray(np.array(SIM1_START) / 12)
    s = assemble_system(th, sensors, ks, active=[])
    dt, steps = 0.01, 100_000
    _, alphas, zs = simulate(ParameterSchedule.static(th), sensors, ks, steps, dt, np.random.default_rng(8))
    kern = kernel_for(s, dt, derivatives=False)
    fs = FilterState(0.0, np.zeros(ks.n), stationary_covariance(s))
    white = np.empty((steps, s.ny))
    nis = np.empty(steps)
    err2 = np.empty(steps)
    pred = np.empty(steps)
    for i, z in enumerate(zs):
        fs, innov = filter_step(fs, s, kern, z)
        Lc = np.linalg.cholesky(innov.Sy)
        white[i] = np.linalg.solve(Lc, innov.nu)
        nis[i] = white[i] @ white[i] / s.ny
        e = s.C @ (fs.m - alphas[i + 1])
        err2[i] = e @ e
        pred[i] = np.trace(s.C @ fs.S @ s.C.T)
    burn = 1000
    var = float(np.mean(nis[burn:]))
    wc = white[burn:]
    rho1 = float(np.mean([np.corrcoef(wc[:-1, j], wc[1:, j])[0, 1] for j in range(s.ny)]))
    rho1_worst = float(max(abs(np.corrcoef(wc[:-1, j], wc[1:, j])[0, 1]) for j in range(s.ny)))
    ratio = float(np.mean(err2[burn:]) / np.mean(pred[burn:]))
    ok = abs(var - 1) < 0.05 and rho1_worst < 0.02 and abs(ratio - 1) < 0.10
    report(8, ok, f"normalised innovation variance {var:.4f} (1 +- 0.05); lag-1 autocorrelation mean {rho1:+.4f}, "
                  f"worst |{rho1_worst:.4f}| (<0.02); squared error / Tr[CSC^T] {ratio:.4f} (1 +- 0.10)",
           time.time() - t0)


def test_9_schedule_validator():
    t0 = time.time()
    ordering = schedule_validate({"theta": LearningSchedule("power", 0.1, 0.75)},
                                 {"o": LearningSchedule("power", 0.1, 0.6)}, slow="theta")
    a = all(c.passed for c in ordering)
    slow = schedule_validate({"theta": LearningSchedule("power", 0.1, 0.45)}, {}, slow="theta")
    b = any(c.name.endswith("square_integrable") and not c.passed for c in slow)
    const = schedule_validate({"theta": LearningSchedule("constant", 0.1)},
                              {"o": LearningSchedule("power", 0.1, 0.6)})
    c = tracking_mode(const)
    report(9, a and b and c, f"0.5 < eps_o=0.6 < eps_theta=0.75: all pass {a}; eps 0.45 fails square "
                             f"integrability {b}; constant rate warns tracking mode {c}", time.time() - t0)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            try:
                fn()
            except AssertionError:
                pass
    print("\n".join(RESULTS[k] for k in sorted(RESULTS)))
