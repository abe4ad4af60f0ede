"""Machine-checkable forms of the sufficient conditions for convergence."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .kalman import NotStableError, are_derivatives, solve_are, solve_lyapunov

NOT_CHECKABLE = ("A.3", "A.4")


@dataclass
class CheckResult:
    name: str
    passed: bool
    evidence: str
    value: float = float("nan")


@dataclass
class ConditionReport:
    entries: list[CheckResult] = field(default_factory=list)

    def add(self, entry: CheckResult):
        self.entries.append(entry)
        return entry

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def to_text(self) -> str:
        lines = [f"{e.name} = {'pass' if e.passed else 'FAIL'} ; {e.evidence}" for e in self.entries]
        lines += [f"{a} = not machine-checkable ; assumed" for a in NOT_CHECKABLE]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "passed", "value", "evidence"])
        for e in self.entries:
            w.writerow([e.name, int(e.passed), f"{e.value:.17g}", e.evidence])
        for a in NOT_CHECKABLE:
            w.writerow([a, "", "", "not machine-checkable"])
        return buf.getvalue()


def check_A_stable(A, tol: float = 1e-12) -> CheckResult:
    ev = np.linalg.eigvals(np.atleast_2d(A))
    worst = ev[np.argmax(ev.real)]
    ok = bool(worst.real < -tol)
    return CheckResult("A_stable", ok, f"max real eigenvalue {worst:.6g}", float(worst.real))


def _bad_eigenvalues(A):
    ev = np.linalg.eigvals(A)
    return ev[ev.real >= 0]


def _pbh(name, A, blocks, axis, rel_tol):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    bad = _bad_eigenvalues(A)
    if bad.size == 0:
        return CheckResult(name, True, "A stable: no eigenvalues with Re >= 0", 1.0)
    margin = np.inf
    for lam in bad:
        M = A - lam * np.eye(n)
        K = np.hstack([M, blocks]) if axis == 1 else np.vstack([M, blocks])
        s = np.linalg.svd(K, compute_uv=False)
        rel = s[min(K.shape) - 1] / max(s[0], 1e-300) if len(s) >= n else 0.0
        margin = min(margin, rel)
        if rel <= rel_tol:
            return CheckResult(name, False, f"rank deficient at eigenvalue {lam:.6g}", float(rel))
    return CheckResult(name, True, f"full rank at all {bad.size} unstable eigenvalues", float(margin))


def check_stabilisable(A, BQhalf, rel_tol: float = 1e-10) -> CheckResult:
    """PBH: rank [A - lam I | B Q^1/2] = n at every eigenvalue with Re >= 0."""
    return _pbh("stabilisable", A, np.atleast_2d(BQhalf), 1, rel_tol)


def check_detectable(A, C, rel_tol: float = 1e-10) -> CheckResult:
    """PBH: rank [A - lam I ; C] = n at every eigenvalue with Re >= 0."""
    return _pbh("detectable", A, np.atleast_2d(C), 0, rel_tol)


# --------------------------------------------------------------------------
# joint OU system


@dataclass
class JointSystem:
    Phi: np.ndarray
    Psi: np.ndarray
    T: np.ndarray
    n: int
    n_theta: int
    n_mov: int  # number of movable scalar coordinates

    @property
    def d(self) -> int:
        return self.Phi.shape[0]


def build_joint_system(sys, Sinf=None, include_tangents: bool = True) -> JointSystem:
    """Latent state, steady-state filter mean and its sensitivities as one OU process.

    Noise is (dv, dw) with covariance blockdiag(Q, R). Tangent blocks cover
    the active theta coordinates of ``sys`` and its movable coordinates.
    """
    if Sinf is None:
        Sinf = solve_are(sys).Sinf
    n, ny = sys.n, sys.ny
    C, A = sys.C, sys.A
    ri = 1.0 / np.diag(sys.R)
    K = (Sinf @ C.T) * ri
    F = A - K @ C
    p, q = (len(sys.theta_names), sys.dC_do.shape[0]) if include_tangents else (0, 0)
    D = p + q
    d = 2 * n + n * D
    Phi = np.zeros((d, d))
    Psi = np.zeros((d, n + ny))
    Phi[:n, :n] = A
    Psi[:n, :n] = sys.B
    Phi[n:2 * n, :n] = K @ C
    Phi[n:2 * n, n:2 * n] = F
    Psi[n:2 * n, n:] = K
    if D:
        dS = are_derivatives(sys, Sinf)
        dA = np.concatenate([sys.dA, np.zeros((q, n, n))])[:D]
        dC = np.concatenate([sys.dC, sys.dC_do])[:D]
        dR = np.concatenate([sys.dR, np.zeros((q, ny, ny))])[:D]
        for j in range(D):
            r = slice(2 * n + j * n, 2 * n + (j + 1) * n)
            dK = (dS[j] @ C.T + Sinf @ dC[j].T) * ri - (Sinf @ C.T) * (ri * np.diag(dR[j]) * ri)
            Phi[r, :n] = dK @ C
            Phi[r, n:2 * n] = dA[j] - dK @ C - K @ dC[j]
            Phi[r, r] = F
            Psi[r, n:] = dK
    T = np.zeros((n + ny, n + ny))
    T[:n, :n] = sys.Q
    T[n:, n:] = sys.R
    return JointSystem(Phi, Psi, T, n, p if include_tangents else 0, q)


def check_block_triangular(js: JointSystem, tol: float = 0.0) -> CheckResult:
    n = js.n
    upper = 0.0
    nb = js.d // n
    for a in range(nb):
        for b in range(a + 1, nb):
            upper = max(upper, np.abs(js.Phi[a * n:(a + 1) * n, b * n:(b + 1) * n]).max())
    return CheckResult("joint_block_lower_triangular", upper <= tol, f"max upper-block entry {upper:.3g}", upper)


@dataclass
class JointStationary:
    check: CheckResult
    Kinf: np.ndarray | None
    residual: float


def check_joint_stable_and_stationary(js: JointSystem) -> JointStationary:
    stab = check_A_stable(js.Phi)
    stab.name = "joint_Phi_stable"
    if not stab.passed:
        return JointStationary(stab, None, float("nan"))
    W = js.Psi @ js.T @ js.Psi.T
    K = solve_lyapunov(js.Phi, W)
    res = float(np.linalg.norm(js.Phi @ K + K @ js.Phi.T + W))
    stab.evidence += f"; Lyapunov residual {res:.3g}"
    return JointStationary(stab, K, res)


def check_controllable(Phi, Psi, rel_tol: float = 1e-12) -> CheckResult:
    """Controllability via the Gramian P solving Phi P + P Phi^T + Psi Psi^T = 0."""
    Psi = np.atleast_2d(Psi)
    try:
        P = solve_lyapunov(Phi, Psi @ Psi.T)
    except NotStableError as exc:
        return CheckResult("controllable", False, f"Gramian undefined: {exc}")
    w, U = np.linalg.eigh(P)
    rel = w[0] / max(w[-1], 1e-300)
    ok = bool(rel > rel_tol)
    evidence = f"smallest/largest Gramian eigenvalue {rel:.3g}"
    if not ok:
        evidence += f"; weakest direction index {int(np.argmax(np.abs(U[:, 0])))}"
    return CheckResult("controllable", ok, evidence, float(rel))


def condition_report(sys, include_tangents: bool = True, schedule_checks=None) -> ConditionReport:
    """All checkable conditions for an assembled system."""
    rep = ConditionReport()
    if schedule_checks:
        for c in schedule_checks:
            rep.add(CheckResult(f"A.1 {c.name}", c.passed, c.detail))
    rep.add(check_A_stable(sys.A))
    w, U = np.linalg.eigh(sys.Q)
    BQh = sys.B @ (U * np.sqrt(np.clip(w, 0, None)))
    rep.add(check_stabilisable(sys.A, BQh))
    rep.add(check_detectable(sys.A, sys.C))
    try:
        ss = solve_are(sys)
    except Exception as exc:  # report, do not abort
        rep.add(CheckResult("ARE", False, str(exc)))
        return rep
    rep.add(CheckResult("ARE", True, f"residual {ss.residual:.3g}", ss.residual))
    js = build_joint_system(sys, ss.Sinf, include_tangents)
    rep.add(check_block_triangular(js))
    st = check_joint_stable_and_stationary(js)
    rep.add(st.check)
    rep.add(check_controllable(js.Phi, js.Psi * np.sqrt(np.clip(np.diag(js.T), 0, None))))
    return rep
