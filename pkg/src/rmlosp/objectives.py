"""Log-likelihood, RML gradient increments and the placement objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .kalman import Innovation
from .tangent import TangentInnovation, TangentState


def _rinv(sys):
    return 1.0 / np.diag(sys.R)


def loglik_increment(m_pred, z, sys, dt: float) -> float:
    """<R^-1 h, z> dt - 1/2 |R^-1/2 h|^2 dt with h = C m_pred + bias."""
    zv = z.z if hasattr(z, "z") else np.asarray(z, dtype=float)
    h = sys.C @ m_pred + sys.bias
    ri = _rinv(sys)
    return float(((ri * h) @ zv - 0.5 * (ri * h) @ h) * dt)


def predictive_loglik_increment(innov: Innovation) -> float:
    """log N(z; C m_pred + bias, C S_pred C^T + R/dt)."""
    L = innov.Sy_chol[0]
    logdet = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    quad = innov.nu @ sla.cho_solve(innov.Sy_chol, innov.nu)
    return float(-0.5 * (logdet + quad + len(innov.nu) * np.log(2 * np.pi)))


def variance_coordinates(names) -> np.ndarray:
    """Mask of theta coordinates handled through the predictive likelihood."""
    return np.array([nm.startswith("tau2_") for nm in names], dtype=bool)


def rml_gradient_increment(innov: Innovation, tinn: TangentInnovation, sys, dt: float) -> np.ndarray:
    """Ascent direction for every active theta coordinate over one step.

    Structural and bias coordinates use h_j^T R^-1 (z - h) dt. Noise-variance
    coordinates use dt times the gradient of the one-step predictive
    log-density, whose covariance C S_pred C^T + R/dt carries the tau2 dependence.
    """
    p = len(sys.theta_names)
    Dh = tinn.Dh[:p]
    g = (Dh * _rinv(sys)) @ innov.nu * dt
    var = variance_coordinates(sys.theta_names)
    if var.any():
        Syinv = sla.cho_solve(innov.Sy_chol, np.eye(len(innov.nu)))
        w = Syinv @ innov.nu
        DSy = tinn.DSy[:p][var]
        tr = np.einsum("ij,cji->c", Syinv, DSy)
        quad = np.einsum("i,cij,j->c", w, DSy, w)
        g[var] = dt * (-0.5 * tr + 0.5 * quad + Dh[var] @ w)
    return g


def rml_objective_increment(innov: Innovation, sys, dt: float) -> np.ndarray:
    """Per-coordinate objective whose theta-gradient is :func:`rml_gradient_increment`."""
    var = variance_coordinates(sys.theta_names)
    girsanov = loglik_increment(innov.m_pred, innov.nu + sys.C @ innov.m_pred + sys.bias, sys, dt)
    return np.where(var, dt * predictive_loglik_increment(innov), girsanov)


def placement_objective_increment(S, M, dt: float) -> float:
    S = S.S if hasattr(S, "S") else S
    return float(np.sum(np.asarray(M) * S) * dt)


@dataclass
class PGPRecord:
    varphi: np.ndarray
    zeta: float
    eta: np.ndarray
    psi: np.ndarray
    iota: float
    phi: np.ndarray


def pgp_diagnostics(u, m, S, ts: TangentState, sys) -> PGPRecord:
    """The six growth-condition functions at a joint state (bias-free).

    ``u`` is the latent state, ``m``/``S`` the filter mean and covariance and
    ``ts`` their sensitivities; innovations are weighted by R^-1.
    """
    C, ri = sys.C, _rinv(sys)
    Cm = C @ m
    Cu = C @ u
    eta = ts.Dm_theta @ C.T  # (p, ny)
    return PGPRecord(
        varphi=Cm,
        zeta=float((ri * Cm) @ (Cu - 0.5 * Cm)),
        eta=eta.T,
        psi=(eta * ri) @ (Cu - Cm),
        iota=float(np.sum(sys.M * S)),
        phi=np.einsum("ij,cji->c", sys.M, ts.DS_o),
    )
