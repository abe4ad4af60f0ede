"""Continuous-discrete Kalman-Bucy filter, Riccati and Lyapunov solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class FilterError(RuntimeError):
    pass


class NotStableError(FilterError):
    pass


class RiccatiError(FilterError):
    pass


@dataclass
class FilterState:
    t: float
    m: np.ndarray
    S: np.ndarray


@dataclass
class Innovation:
    """Intermediate quantities of one filter step (consumed by tangents/objectives)."""

    m_pred: np.ndarray
    S_pred: np.ndarray
    nu: np.ndarray  # z - C m_pred - bias
    Sy: np.ndarray  # C S_pred C^T + R/dt
    Sy_chol: tuple
    K: np.ndarray


def _symmetrize(S):
    return 0.5 * (S + S.T)


def filter_step(fs: FilterState, sys, kernel, z) -> tuple[FilterState, Innovation]:
    """Exact OU prediction followed by a Joseph-form update with rate data z."""
    dt = kernel.dt
    zv = z.z if hasattr(z, "z") else np.asarray(z, dtype=float)
    Phi = kernel.Phi
    m_pred = Phi @ fs.m
    S_pred = _symmetrize(Phi @ fs.S @ Phi.T + kernel.noise_cov)
    C = sys.C
    Rdt = sys.R / dt
    Sy = _symmetrize(C @ S_pred @ C.T + Rdt)
    try:
        chol = sla.cho_factor(Sy)
    except np.linalg.LinAlgError as exc:
        raise FilterError("innovation covariance is not positive definite") from exc
    K = sla.cho_solve(chol, C @ S_pred).T
    nu = zv - C @ m_pred - sys.bias
    m = m_pred + K @ nu
    IKC = np.eye(len(m)) - K @ C
    S = _symmetrize(IKC @ S_pred @ IKC.T + K @ Rdt @ K.T)
    return FilterState(fs.t + dt, m, S), Innovation(m_pred, S_pred, nu, Sy, chol, K)


def kb_step(fs: FilterState, sys, kernel, z) -> FilterState:
    return filter_step(fs, sys, kernel, z)[0]


def covariance_step(S, sys, kernel):
    """Covariance-only recursion (the filter's Riccati difference equation)."""
    Phi = kernel.Phi
    S_pred = _symmetrize(Phi @ S @ Phi.T + kernel.noise_cov)
    C = sys.C
    Sy = C @ S_pred @ C.T + sys.R / kernel.dt
    K = np.linalg.solve(Sy, C @ S_pred).T
    return _symmetrize(S_pred - K @ Sy @ K.T)


# --------------------------------------------------------------------------
# Lyapunov


def check_stable(F, tol=0.0):
    ev = np.linalg.eigvals(F)
    worst = ev[np.argmax(ev.real)]
    if worst.real >= -tol:
        raise NotStableError(f"matrix is not stable: eigenvalue {worst:.6g} has non-negative real part")


def solve_lyapunov(F, W, method: str = "schur") -> np.ndarray:
    """Solve F K + K F^T + W = 0 for stable F.

    ``method="schur"`` uses Bartels-Stewart (scipy); ``"kron"`` assembles and
    solves the n(n+1)/2 symmetric Kronecker system directly, which costs
    O(n^6) and is only meant for n <= 64.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    check_stable(F)
    if method == "schur":
        K = sla.solve_continuous_lyapunov(F, -W)
    elif method == "kron":
        K = _lyapunov_kron(F, _symmetrize(W))
    else:
        raise ValueError(f"unknown method {method!r}")
    return _symmetrize(K)


def _lyapunov_kron(F, W):
    n = F.shape[0]
    iu = np.triu_indices(n)
    m = len(iu[0])
    pos = np.full((n, n), -1)
    pos[iu] = np.arange(m)
    pos[(iu[1], iu[0])] = np.arange(m)
    # row (i, j): sum_k F[i,k] K[k,j] + K[i,k] F[j,k] = -W[i,j]
    L = np.zeros((m, m))
    for r, (i, j) in enumerate(zip(*iu)):
        np.add.at(L[r], pos[:, j], F[i])
        np.add.at(L[r], pos[i, :], F[j])
    x = np.linalg.solve(L, -W[iu])
    return x[pos]


def lyapunov_residual(F, K, W) -> float:
    return float(np.linalg.norm(F @ K + K @ F.T + W))


# --------------------------------------------------------------------------
# algebraic Riccati equation


@dataclass
class SteadyState:
    Sinf: np.ndarray
    residual: float
    iterations: int


def are_residual(A, W, G, S) -> float:
    return float(np.linalg.norm(A @ S + S @ A.T + W - S @ G @ S))


def _are_terms(sys):
    A = sys.A
    W = sys.B @ sys.Q @ sys.B.T
    Rinv = np.diag(1.0 / np.diag(sys.R)) if np.allclose(sys.R, np.diag(np.diag(sys.R))) else np.linalg.inv(sys.R)
    G = sys.C.T @ Rinv @ sys.C
    return A, _symmetrize(W), _symmetrize(G)


def newton_refine(A, W, G, S, tol=1e-13, max_iter=50):
    """Newton-Kleinman iterations on A S + S A^T + W - S G S = 0."""
    for it in range(1, max_iter + 1):
        F = A - S @ G
        S_new = solve_lyapunov(F, W + S @ G @ S)
        step = np.linalg.norm(S_new - S)
        S = S_new
        if step <= tol * (1.0 + np.linalg.norm(S)):
            return S, it
    return S, max_iter


def solve_are(sys, *, method: str = "newton", S0=None, dt: float = 1e-3,
              tol: float = 1e-12, max_iter: int = 200_000) -> SteadyState:
    """Stabilising solution of the filter ARE for an assembled system.

    ``method="newton"`` runs Newton-Kleinman from ``S0`` (zero by default,
    valid because A is stable). ``method="fixed_point"`` first iterates the
    discrete covariance recursion at step ``dt`` until successive iterates
    differ by less than ``tol`` and then polishes with Newton steps.
    """
    A, W, G = _are_terms(sys)
    n = A.shape[0]
    S = np.zeros((n, n)) if S0 is None else _symmetrize(np.asarray(S0, dtype=float))
    iters = 0
    if method == "fixed_point":
        from .signal import make_kernel

        kern = make_kernel(sys.A, sys.B, sys.Q, dt, lam=sys.lam, V=sys.V) if hasattr(sys, "lam") \
            else make_kernel(sys.A, sys.B, sys.Q, dt)
        for iters in range(1, max_iter + 1):
            S_new = covariance_step(S, sys, kern)
            if np.linalg.norm(S_new - S) < tol:
                S = S_new
                break
            S = S_new
        else:
            raise RiccatiError(f"fixed-point iteration did not converge; last residual "
                               f"{are_residual(A, W, G, S):.3e}")
    elif method != "newton":
        raise ValueError(f"unknown method {method!r}")
    try:
        S, it = newton_refine(A, W, G, S)
    except NotStableError as exc:
        raise RiccatiError(f"Newton refinement lost stability: {exc}") from exc
    iters += it
    res = are_residual(A, W, G, S)
    if not res < 1e-8 * (1.0 + np.linalg.norm(S)):
        raise RiccatiError(f"ARE did not converge; last residual {res:.3e}")
    return SteadyState(S, res, iters)


@dataclass
class DREFixedPoint:
    posterior: np.ndarray  # fixed point of the filter recursion (predict, then update)
    midpoint: np.ndarray  # posterior advanced by half a prediction step
    iterations: int


def dre_fixed_point(sys, dt: float = 1e-3, S0=None, tol: float = 1e-14,
                    max_iter: int = 1_000_000) -> DREFixedPoint:
    """Iterate the filter's covariance recursion to its fixed point.

    Prediction is the exact flow of the Lyapunov part of the Riccati ODE and
    the update is the exact flow of dS/dt = -S G S over dt, so the recursion
    is a Lie splitting and its fixed point is O(dt) from the ARE solution.
    Half a prediction step applied to it gives the fixed point of the
    symmetric (Strang) splitting, which is O(dt^2) accurate.
    """
    from .signal import kernel_for

    k = kernel_for(sys, dt, derivatives=False)
    half = kernel_for(sys, 0.5 * dt, derivatives=False)
    n = sys.A.shape[0]
    S = np.zeros((n, n)) if S0 is None else _symmetrize(np.asarray(S0, dtype=float))
    for it in range(1, max_iter + 1):
        S_new = covariance_step(S, sys, k)
        if np.linalg.norm(S_new - S) < tol:
            S = S_new
            break
        S = S_new
    else:
        raise RiccatiError(f"covariance recursion did not settle in {max_iter} iterations")
    mid = _symmetrize(half.Phi @ S @ half.Phi.T + half.noise_cov)
    return DREFixedPoint(S, mid, it)


def integrate_dre(sys, S0, t_end: float, rtol=1e-11, atol=1e-14):
    """Integrate the continuous Riccati ODE with an adaptive Runge-Kutta method."""
    from scipy.integrate import solve_ivp

    A, W, G = _are_terms(sys)
    n = A.shape[0]

    def rhs(_, y):
        S = y.reshape(n, n)
        return (A @ S + S @ A.T + W - S @ G @ S).ravel()

    sol = solve_ivp(rhs, (0.0, t_end), np.asarray(S0, dtype=float).ravel(), method="DOP853",
                    rtol=rtol, atol=atol)
    return _symmetrize(sol.y[:, -1].reshape(n, n))


def asymptotic_objective(theta, sensors, ks, M_spec="identity", *, B=None, M=None,
                         normalize="marginal") -> float:
    """Tr[M Sinf(theta, o)]."""
    from .spectral import assemble_system

    sys = assemble_system(theta, sensors, ks, B=B, M_spec=M_spec, M=M, active=[], normalize=normalize)
    return float(np.trace(sys.M @ solve_are(sys).Sinf))


def are_derivatives(sys, Sinf=None) -> np.ndarray:
    """dSinf along every theta direction then every movable sensor coordinate."""
    if Sinf is None:
        Sinf = solve_are(sys).Sinf
    A, W, G = _are_terms(sys)
    ri = 1.0 / np.diag(sys.R)
    C = sys.C
    F = A - Sinf @ G
    p, q = len(sys.theta_names), sys.dC_do.shape[0]
    out = np.zeros((p + q, len(A), len(A)))
    dC = np.concatenate([sys.dC, sys.dC_do])
    dR = np.concatenate([sys.dR, np.zeros((q,) + sys.R.shape)])
    for j in range(p + q):
        X = np.zeros_like(A)
        if j < p:
            dAS = sys.dA[j] @ Sinf
            X += dAS + dAS.T + sys.B @ sys.dQ[j] @ sys.B.T
        H = (dC[j].T * ri) @ C
        dG = H + H.T - (C.T * (ri * np.diag(dR[j]) * ri)) @ C
        X -= Sinf @ dG @ Sinf
        out[j] = solve_lyapunov(F, X)
    return out


def are_gradient(sys, Sinf=None):
    """Tr[M Sinf] and its gradient in the movable sensor coordinates (adjoint form)."""
    if Sinf is None:
        Sinf = solve_are(sys).Sinf
    A, W, G = _are_terms(sys)
    ri = 1.0 / np.diag(sys.R)
    F = A - Sinf @ G
    Lam = solve_lyapunov(F.T, sys.M)
    grad = np.zeros(sys.dC_do.shape[0])
    for c, dC in enumerate(sys.dC_do):
        H = (dC.T * ri) @ sys.C
        grad[c] = -np.sum(Lam * (Sinf @ (H + H.T) @ Sinf))
    return float(np.sum(sys.M * Sinf)), grad
