"""Forward sensitivities of the discrete filter in theta and sensor coordinates.

All directions are stacked on a leading axis: the first ``p`` entries are the
active theta coordinates, the remaining ``q`` the movable sensor coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .kalman import FilterState, Innovation


@dataclass
class TangentState:
    Dm: np.ndarray  # (p + q, n)
    DS: np.ndarray  # (p + q, n, n)
    p: int  # number of theta directions

    @classmethod
    def zeros(cls, n: int, p: int, q: int) -> "TangentState":
        return cls(np.zeros((p + q, n)), np.zeros((p + q, n, n)), p)

    @property
    def Dm_theta(self):
        return self.Dm[: self.p]

    @property
    def DS_theta(self):
        return self.DS[: self.p]

    @property
    def Dm_o(self):
        return self.Dm[self.p:]

    @property
    def DS_o(self):
        return self.DS[self.p:]


@dataclass
class TangentInnovation:
    """Derivatives of the predicted quantities, needed by the gradient increments."""

    Dm_pred: np.ndarray  # (D, n)
    Dh: np.ndarray  # (D, ny): derivative of C m_pred + bias
    DSy: np.ndarray  # (D, ny, ny)
    Dnu: np.ndarray  # (D, ny)


def direction_stacks(sys, kernel):
    """(dPhi, dN, dC, dRdt, dbias) over all directions, theta first."""
    p = len(sys.theta_names)
    q = sys.dC_do.shape[0]
    n, ny = sys.n, sys.ny
    dPhi = np.zeros((p + q, n, n))
    dN = np.zeros((p + q, n, n))
    if p:
        if kernel.dPhi is None:
            raise ValueError("kernel was built without theta derivatives")
        dPhi[:p] = kernel.dPhi
        dN[:p] = kernel.dNoise
    dC = np.concatenate([sys.dC, sys.dC_do], axis=0)
    dR = np.concatenate([sys.dR, np.zeros((q, ny, ny))], axis=0) / kernel.dt
    db = np.concatenate([sys.dbias, np.zeros((q, ny))], axis=0)
    return dPhi, dN, dC, dR, db


def tangent_update(fs: FilterState, ts: TangentState, sys, kernel, innov: Innovation,
                   stacks=None) -> tuple[TangentState, TangentInnovation]:
    """Differentiate one predict/update step given the previous filter state.

    ``fs``/``ts`` are the state and sensitivities before the step and
    ``innov`` the quantities of the same step from :func:`kalman.filter_step`.
    """
    dPhi, dN, dC, dRdt, db = direction_stacks(sys, kernel) if stacks is None else stacks
    Phi, C = kernel.Phi, sys.C
    m, S = fs.m, fs.S
    P, K, mp = innov.S_pred, innov.K, innov.m_pred

    Dmp = ts.Dm @ Phi.T + dPhi @ m
    PhiS = Phi @ S
    X = dPhi @ PhiS.T  # dPhi S Phi^T
    DP = Phi @ ts.DS @ Phi.T + X + np.swapaxes(X, 1, 2) + dN

    CP = C @ P  # (ny, n)
    Y = dC @ CP.T  # C_j P C^T
    DSy = C @ DP @ C.T + Y + np.swapaxes(Y, 1, 2) + dRdt
    Dnu = -(dC @ mp) - Dmp @ C.T - db
    # K_j = (P_j C^T + P C_j^T - K Sy_j) Sy^-1
    G = DP @ C.T + P @ np.swapaxes(dC, 1, 2) - K @ DSy
    Syinv = sla.cho_solve(innov.Sy_chol, np.eye(len(C)))
    DK = G @ Syinv
    Dm_new = Dmp + DK @ innov.nu + Dnu @ K.T

    # Joseph form is stationary in K at the optimal gain, so K_j drops out
    L = np.eye(len(m)) - K @ C
    Z = K @ dC @ P @ L.T
    DS_new = L @ DP @ L.T - Z - np.swapaxes(Z, 1, 2) + K @ dRdt @ K.T
    DS_new = 0.5 * (DS_new + np.swapaxes(DS_new, 1, 2))

    Dh = Dmp @ C.T + dC @ mp + db
    return TangentState(Dm_new, DS_new, ts.p), TangentInnovation(Dmp, Dh, DSy, Dnu)


def tangent_step(fs: FilterState, ts: TangentState, sys, kernel, z) -> TangentState:
    """Sensitivities after one step; recomputes the filter step internally."""
    from .kalman import filter_step

    _, innov = filter_step(fs, sys, kernel, z)
    return tangent_update(fs, ts, sys, kernel, innov)[0]


def placement_gradient(ts: TangentState, M) -> np.ndarray:
    """Tr[M dS/do_c] for every movable coordinate c."""
    return np.einsum("ij,cji->c", np.asarray(M, dtype=float), ts.DS_o)
