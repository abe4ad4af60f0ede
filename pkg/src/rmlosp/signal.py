"""Exact simulation of the truncated spectral SDE and its noisy observations."""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .spectral import ModelParams, SystemMatrices


@dataclass
class TransitionKernel:
    """One-step law alpha' = Phi alpha + xi, xi ~ N(0, noise_cov).

    ``dPhi``/``dNoise`` hold derivatives along the theta coordinates of the
    system the kernel was built from (empty stacks when not requested).
    """

    dt: float
    Phi: np.ndarray
    noise_cov: np.ndarray
    factor: np.ndarray | None = None  # filled lazily by step_signal
    dPhi: np.ndarray | None = None
    dNoise: np.ndarray | None = None

    def sampling_factor(self) -> np.ndarray:
        if self.factor is None:
            self.factor = _psd_factor(self.noise_cov)
        return self.factor


def _psd_factor(S):
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    return U * np.sqrt(np.clip(w, 0.0, None))


def _integral_weights(s, dt):
    """F(s) = int_0^dt exp(s u) du and dF/ds, elementwise for complex s."""
    sdt = s * dt
    small = np.abs(sdt) < 1e-8
    s_safe = np.where(small, 1.0, s)
    em1 = np.expm1(sdt)
    F = np.where(small, dt * (1 + sdt / 2), em1 / s_safe)
    dF = np.where(small, dt * dt * (0.5 + sdt / 3),
                  (dt * np.exp(sdt) * s_safe - em1) / s_safe ** 2)
    return F, dF


def _van_loan(A, W, dt):
    n = A.shape[0]
    H = np.zeros((2 * n, 2 * n))
    H[:n, :n] = -A
    H[:n, n:] = W
    H[n:, n:] = A.T
    E = expm(H * dt)
    Phi = E[n:, n:].T
    return Phi, Phi @ E[:n, n:]


def make_kernel(A, B, Q, dt: float, *, lam=None, V=None, dlam=None, dQ=None) -> TransitionKernel:
    """Exact transition kernel of d alpha = A alpha dt + B dv, Cov(dv) = Q dt.

    With the eigen-decomposition ``A = V diag(lam) V^H`` (V unitary, as
    assembled by :func:`rmlosp.spectral.assemble_system`) everything is
    elementwise in the eigenbasis and the theta-derivatives ``dlam``/``dQ``
    can be propagated too. Without it a Van Loan block exponential is used.
    """
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.eye(n) if B is None else np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    W = B @ Q @ B.T
    if dt == 0:
        return TransitionKernel(0.0, np.eye(n), np.zeros((n, n)), np.zeros((n, n)))
    if lam is None:
        Phi, N = _van_loan(A, W, dt)
        N = 0.5 * (N + N.T)
        return TransitionKernel(dt, Phi, N)

    Vh = V.conj().T
    s = lam[:, None] + np.conj(lam)[None, :]
    F, dF = _integral_weights(s, dt)
    Wt = Vh @ W @ V
    e = np.exp(lam * dt)
    Phi = np.real((V * e) @ Vh)
    N = np.real(V @ (Wt * F) @ Vh)
    N = 0.5 * (N + N.T)
    kern = TransitionKernel(dt, Phi, N)
    if dlam is not None:
        dPhi = np.real((V[None] * (dlam * dt * e)[:, None, :]) @ Vh)
        ds = dlam[:, :, None] + np.conj(dlam)[:, None, :]
        dWt = Vh @ (B @ dQ @ B.T) @ V
        dN = np.real(V @ (dWt * F + Wt * dF * ds) @ Vh)
        kern.dPhi = dPhi
        kern.dNoise = 0.5 * (dN + np.swapaxes(dN, 1, 2))
    return kern


def kernel_for(sys: SystemMatrices, dt: float, derivatives: bool = True) -> TransitionKernel:
    if derivatives:
        return make_kernel(sys.A, sys.B, sys.Q, dt, lam=sys.lam, V=sys.V, dlam=sys.dlam, dQ=sys.dQ)
    return make_kernel(sys.A, sys.B, sys.Q, dt, lam=sys.lam, V=sys.V)


def stationary_covariance(sys: SystemMatrices) -> np.ndarray:
    """Solution P of A P + P A^T + B Q B^T = 0, elementwise in the eigenbasis."""
    V, lam = sys.V, sys.lam
    Wt = V.conj().T @ (sys.B @ sys.Q @ sys.B.T) @ V
    P = np.real(V @ (Wt / -(lam[:, None] + np.conj(lam)[None, :])) @ V.conj().T)
    return 0.5 * (P + P.T)


@dataclass
class SignalState:
    t: float
    alpha: np.ndarray


@dataclass
class ObservationRecord:
    t: float
    z: np.ndarray


def step_signal(state: SignalState, kernel: TransitionKernel, rng) -> SignalState:
    L = kernel.sampling_factor()
    xi = L @ rng.standard_normal(L.shape[1])
    return SignalState(state.t + kernel.dt, kernel.Phi @ state.alpha + xi)


def observe(state: SignalState, sys: SystemMatrices, dt: float, rng) -> ObservationRecord:
    """Rate observation z = C alpha + bias + eta, eta ~ N(0, R/dt)."""
    sd = np.sqrt(np.diag(sys.R) / dt)
    z = sys.C @ state.alpha + sys.bias + sd * rng.standard_normal(sys.ny)
    return ObservationRecord(state.t, z)


@dataclass
class ParameterSchedule:
    """Piecewise-constant, right-continuous true parameters."""

    knots: list[tuple[float, ModelParams]]

    def __post_init__(self):
        if not self.knots:
            raise ValueError("schedule needs at least one knot")
        times = [t for t, _ in self.knots]
        if times[0] != 0.0:
            raise ValueError("first knot must be at t=0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("knot times must be strictly increasing")

    @classmethod
    def static(cls, theta: ModelParams) -> "ParameterSchedule":
        return cls([(0.0, theta)])

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.knots]

    def at(self, t: float) -> ModelParams:
        return schedule_at(self, t)


def schedule_at(sched: ParameterSchedule, t: float) -> ModelParams:
    if t < 0:
        raise ValueError("t must be >= 0")
    i = bisect.bisect_right(sched.times, t) - 1
    return sched.knots[i][1]


def knot_steps(sched: ParameterSchedule, dt: float) -> list[int]:
    """Step index at which each knot takes effect (knots snapped to the grid)."""
    return [int(round(t / dt)) for t in sched.times]


def theta_at_step(sched: ParameterSchedule, steps_idx: list[int], i: int) -> ModelParams:
    return sched.knots[bisect.bisect_right(steps_idx, i) - 1][1]


def simulate(sched: ParameterSchedule, sensors, ks, steps: int, dt: float, rng, *,
             B=None, normalize="marginal", alpha0=None):
    """Latent trajectory and rate observations for ``steps`` steps.

    The kernel is rebuilt at each knot; knots are snapped to the step grid
    (a knot at time t takes effect for the step starting at t).
    Returns ``(times, alphas, zs)`` with ``alphas`` of shape (steps + 1, n).
    """
    from .spectral import assemble_system

    cache = {}

    def system(theta):
        key = id(theta)
        if key not in cache:
            sys = assemble_system(theta, sensors, ks, B=B, active=[], normalize=normalize)
            cache[key] = (sys, kernel_for(sys, dt, derivatives=False))
        return cache[key]

    kidx = knot_steps(sched, dt)
    sys0, _ = system(sched.at(0.0))
    if alpha0 is None:
        alpha0 = _psd_factor(stationary_covariance(sys0)) @ rng.standard_normal(ks.n)
    state = SignalState(0.0, np.asarray(alpha0, dtype=float))
    alphas = np.empty((steps + 1, ks.n))
    zs = np.empty((steps, sensors.ny))
    times = dt * np.arange(steps + 1)
    alphas[0] = state.alpha
    for i in range(steps):
        sys, kern = system(theta_at_step(sched, kidx, i))
        state = step_signal(state, kern, rng)
        state.t = times[i + 1]
        zs[i] = observe(state, sys, dt, rng).z
        alphas[i + 1] = state.alpha
    return times, alphas, zs
