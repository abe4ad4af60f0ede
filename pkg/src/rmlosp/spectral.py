"""Truncated real-Fourier representation of the stochastic advection-diffusion
equation on the unit torus.

The state vector holds real coefficients of the basis

    1, cos(2pi k.x), sin(2pi k.x), ...   for k in the upper half-plane,

ordered as [constant, cos k_1, sin k_1, cos k_2, sin k_2, ...]. In this basis
the drift matrix is block diagonal and every 2x2 block shares the eigenvectors
(1, +-i)/sqrt(2), so the whole system diagonalises in one *fixed* unitary
matrix. The kernel and tangent code rely on that.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import j1

TWO_PI = 2.0 * math.pi

STRUCTURAL_NAMES = ("rho0", "sigma2", "zeta", "rho1", "gamma", "alpha", "mu_x", "mu_y")


class TruncationError(ValueError):
    pass


class AssemblyError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ModelParams:
    """Model parameters theta.

    ``tau2`` holds one sensor variance per noise class and ``beta`` one bias
    per bias class. Coordinates are addressed by flat names, e.g.
    ``"zeta"``, ``"mu_x"``, ``"tau2_2"``, ``"beta_1"`` (class indices in names
    are 1-based; class indices stored on sensors are 0-based).
    """

    rho0: float
    sigma2: float
    zeta: float
    rho1: float
    gamma_aniso: float
    alpha: float
    mu: tuple[float, float] = (0.0, 0.0)
    tau2: tuple[float, ...] = (0.01,)
    beta: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        object.__setattr__(self, "tau2", tuple(float(v) for v in self.tau2))
        object.__setattr__(self, "beta", tuple(float(v) for v in self.beta))
        for name in ("rho0", "sigma2", "zeta", "rho1", "gamma_aniso"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if not 0.0 <= self.alpha <= math.pi / 2 + 1e-12:
            raise ValueError(f"alpha must lie in [0, pi/2], got {self.alpha}")
        if len(self.mu) != 2:
            raise ValueError("mu must have two components")
        if len(self.tau2) == 0 or any(not v > 0 for v in self.tau2):
            raise ValueError(f"every tau2 entry must be > 0, got {self.tau2}")
        if len(self.beta) == 0:
            raise ValueError("beta needs at least one bias class")

    @property
    def names(self) -> list[str]:
        return (
            list(STRUCTURAL_NAMES)
            + [f"tau2_{c + 1}" for c in range(len(self.tau2))]
            + [f"beta_{c + 1}" for c in range(len(self.beta))]
        )

    def as_dict(self) -> dict[str, float]:
        out = {
            "rho0": self.rho0,
            "sigma2": self.sigma2,
            "zeta": self.zeta,
            "rho1": self.rho1,
            "gamma": self.gamma_aniso,
            "alpha": self.alpha,
            "mu_x": self.mu[0],
            "mu_y": self.mu[1],
        }
        out.update({f"tau2_{c + 1}": v for c, v in enumerate(self.tau2)})
        out.update({f"beta_{c + 1}": v for c, v in enumerate(self.beta)})
        return out

    def get(self, name: str) -> float:
        try:
            return self.as_dict()[name]
        except KeyError:
            raise KeyError(f"unknown parameter coordinate {name!r}") from None

    def values(self, names=None) -> np.ndarray:
        d = self.as_dict()
        return np.array([d[n] for n in (self.names if names is None else names)], dtype=float)

    def replace(self, **updates: float) -> "ModelParams":
        """Return a copy with flat-named coordinates replaced."""
        d = self.as_dict()
        for k, v in updates.items():
            if k not in d:
                raise KeyError(f"unknown parameter coordinate {k!r}")
            d[k] = float(v)
        return ModelParams(
            rho0=d["rho0"],
            sigma2=d["sigma2"],
            zeta=d["zeta"],
            rho1=d["rho1"],
            gamma_aniso=d["gamma"],
            alpha=d["alpha"],
            mu=(d["mu_x"], d["mu_y"]),
            tau2=tuple(d[f"tau2_{c + 1}"] for c in range(len(self.tau2))),
            beta=tuple(d[f"beta_{c + 1}"] for c in range(len(self.beta))),
        )

    def with_values(self, names, values) -> "ModelParams":
        return self.replace(**dict(zip(names, np.asarray(values, dtype=float))))


DEFAULT_BOUNDS = {
    "rho0": (0.005, 2.0),
    "sigma2": (1e-3, 5.0),
    "zeta": (0.01, 5.0),
    "rho1": (0.01, 1.0),
    "gamma": (0.1, 10.0),
    "alpha": (0.0, math.pi / 2),
    "mu_x": (-2.0, 2.0),
    "mu_y": (-2.0, 2.0),
    "tau2": (1e-4, 5.0),
    "beta": (-10.0, 10.0),
}


@dataclass(frozen=True)
class ParameterSpace:
    """Box constraint on the parameter coordinates."""

    bounds: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"bounds for {name} must satisfy lower < upper")

    def bound(self, name: str) -> tuple[float, float]:
        if name in self.bounds:
            return self.bounds[name]
        family = name.split("_")[0] if name.startswith(("tau2_", "beta_")) else name
        return DEFAULT_BOUNDS[family]

    def contains(self, name: str, value: float) -> bool:
        lo, hi = self.bound(name)
        return lo <= value <= hi


# --------------------------------------------------------------------------
# wavenumbers and basis


def in_upper_half_plane(k) -> bool:
    kx, ky = int(k[0]), int(k[1])
    return kx + ky > 0 or (kx + ky == 0 and kx > 0)


def _half_plane_sorted(max_sq_norm: int) -> list[tuple[int, int]]:
    r = int(math.isqrt(max_sq_norm)) + 1
    ks = [
        (kx, ky)
        for kx in range(-r, r + 1)
        for ky in range(-r, r + 1)
        if 0 < kx * kx + ky * ky <= max_sq_norm and in_upper_half_plane((kx, ky))
    ]
    return sorted(ks, key=lambda k: (k[0] ** 2 + k[1] ** 2, k[0], k[1]))


@dataclass(frozen=True)
class WaveNumberSet:
    ks: np.ndarray  # (m, 2) int, upper half-plane, sorted
    include_constant: bool = True

    def __post_init__(self):
        ks = np.asarray(self.ks, dtype=int).reshape(-1, 2)
        object.__setattr__(self, "ks", ks)
        seen = set()
        for k in map(tuple, ks):
            if not in_upper_half_plane(k):
                raise TruncationError(f"wavenumber {k} is not in the upper half-plane")
            if k in seen:
                raise TruncationError(f"duplicate wavenumber {k}")
            seen.add(k)

    @property
    def n(self) -> int:
        return int(self.include_constant) + 2 * len(self.ks)

    @property
    def offset(self) -> int:
        return int(self.include_constant)

    @property
    def angular(self) -> np.ndarray:
        """Angular wavenumbers 2*pi*k, shape (m, 2)."""
        return TWO_PI * self.ks.astype(float)

    def cos_index(self, j: int) -> int:
        return self.offset + 2 * j

    def sin_index(self, j: int) -> int:
        return self.offset + 2 * j + 1


def build_truncation(target_n=None, *, max_sq_norm=None, include_constant=True) -> WaveNumberSet:
    """Deterministic truncation of the half-plane lattice.

    Either ``target_n`` (basis size; the first wavenumbers in |k|^2 then
    lexicographic order are taken) or ``max_sq_norm`` (all k with
    |k|^2 <= cutoff) must be given.
    """
    if (target_n is None) == (max_sq_norm is None):
        raise TruncationError("give exactly one of target_n or max_sq_norm")
    if max_sq_norm is not None:
        if max_sq_norm < 0:
            raise TruncationError("max_sq_norm must be non-negative")
        return WaveNumberSet(np.array(_half_plane_sorted(int(max_sq_norm)), dtype=int).reshape(-1, 2),
                             include_constant)
    target_n = int(target_n)
    base = int(include_constant)
    if target_n < max(base, 1) or (target_n - base) % 2:
        lo = max(base if base else 2, target_n - 1)
        nearest = sorted({lo, target_n + 1} - {target_n})
        raise TruncationError(
            f"no exact truncation of size {target_n} "
            f"(include_constant={include_constant}); nearest achievable sizes: {nearest}"
        )
    m = (target_n - base) // 2
    cutoff = 1
    while True:
        ks = _half_plane_sorted(cutoff)
        if len(ks) >= m:
            break
        cutoff *= 2
    return WaveNumberSet(np.array(ks[:m], dtype=int).reshape(-1, 2), include_constant)


def basis_matrix(points, ks: WaveNumberSet) -> np.ndarray:
    """Real basis functions evaluated at ``points`` -> (n_points, n)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    phase = pts @ ks.angular.T
    out = np.empty((pts.shape[0], ks.n))
    if ks.include_constant:
        out[:, 0] = 1.0
    out[:, ks.offset::2] = np.cos(phase)
    out[:, ks.offset + 1::2] = np.sin(phase)
    return out


def evaluate_field(coeffs, points, ks: WaveNumberSet) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != ks.n:
        raise ValueError(f"expected {ks.n} coefficients, got {coeffs.shape[-1]}")
    return basis_matrix(points, ks) @ coeffs.T


def eigenbasis(ks: WaveNumberSet) -> np.ndarray:
    """Fixed unitary V with A = V diag(lam) V^H for every assembled A."""
    n = ks.n
    V = np.zeros((n, n), dtype=complex)
    if ks.include_constant:
        V[0, 0] = 1.0
    h = 1.0 / math.sqrt(2.0)
    for j in range(len(ks.ks)):
        c, s = ks.cos_index(j), ks.sin_index(j)
        V[c, c] = h
        V[c, s] = h
        V[s, c] = 1j * h
        V[s, s] = -1j * h
    return V


# --------------------------------------------------------------------------
# operator eigenvalues and noise spectrum


def diffusion_matrix(rho1: float, gamma: float, alpha: float) -> np.ndarray:
    """Sigma = rho1^2 (M^T M)^{-1}, M = [[c, s], [-g s, g c]]."""
    c, s = math.cos(alpha), math.sin(alpha)
    g2 = gamma * gamma
    return rho1 ** 2 * np.array([[s * s / g2 + c * c, c * s * (1 - 1 / g2)],
                                 [c * s * (1 - 1 / g2), c * c / g2 + s * s]])


def _diffusion_derivatives(rho1, gamma, alpha):
    c, s = math.cos(alpha), math.sin(alpha)
    sig = diffusion_matrix(rho1, gamma, alpha)
    d_rho1 = 2.0 * sig / rho1
    d_gamma = rho1 ** 2 * (2.0 / gamma ** 3) * np.array([[-s * s, c * s], [c * s, -c * c]])
    w = rho1 ** 2 * (1 - 1 / gamma ** 2)
    d_alpha = w * np.array([[-math.sin(2 * alpha), math.cos(2 * alpha)],
                            [math.cos(2 * alpha), math.sin(2 * alpha)]])
    return sig, d_rho1, d_gamma, d_alpha


def operator_eigenvalue(k, theta: ModelParams) -> complex:
    """lambda_k = -(i k'.mu + k'^T Sigma k' + zeta), k' = 2 pi k."""
    kp = TWO_PI * np.asarray(k, dtype=float)
    sig = diffusion_matrix(theta.rho1, theta.gamma_aniso, theta.alpha)
    return complex(-(kp @ sig @ kp + theta.zeta), -(kp @ np.asarray(theta.mu)))


def whittle_amplitude(k, rho0: float, sigma2: float) -> float:
    kp = TWO_PI * np.asarray(k, dtype=float)
    return math.sqrt(sigma2) / TWO_PI / (kp @ kp + 1.0 / rho0 ** 2)


def noise_spectrum(k, theta: ModelParams) -> float:
    """eta_k = sigma/(2 pi) (k'^T k' + rho0^-2)^-1."""
    return whittle_amplitude(k, theta.rho0, theta.sigma2)


def disc_average_coeffs(o, r: float, ks: WaveNumberSet) -> np.ndarray:
    """Exact disc averages of exp(i k'.x) over |x - o| <= r, constant entry first."""
    if not 0.0 < r < 0.5:
        raise ValueError(f"disc radius must lie in (0, 0.5), got {r}")
    o = np.asarray(o, dtype=float)
    kp = ks.angular
    out = np.exp(1j * (kp @ o)) * _bessel_factor(np.hypot(kp[:, 0], kp[:, 1]) * r)
    if ks.include_constant:
        out = np.concatenate([[1.0 + 0j], out])
    return out


def _bessel_factor(x):
    x = np.asarray(x, dtype=float)
    safe = np.where(x == 0.0, 1.0, x)
    return np.where(x == 0.0, 1.0, 2.0 * j1(safe) / safe)


# --------------------------------------------------------------------------
# sensors


@dataclass(frozen=True)
class SensorArray:
    positions: np.ndarray  # (ny, 2), wrapped into [0, 1)
    radius: float = 0.05
    noise_class: np.ndarray | None = None  # 0-based, length ny
    bias_class: np.ndarray | None = None
    movable: np.ndarray | None = None

    def __post_init__(self):
        pos = np.mod(np.asarray(self.positions, dtype=float).reshape(-1, 2), 1.0)
        object.__setattr__(self, "positions", pos)
        ny = pos.shape[0]
        for name, default in (("noise_class", 0), ("bias_class", 0)):
            v = getattr(self, name)
            v = np.full(ny, default, dtype=int) if v is None else np.asarray(v, dtype=int).reshape(ny)
            if (v < 0).any():
                raise ValueError(f"{name} indices must be >= 0")
            object.__setattr__(self, name, v)
        mov = np.ones(ny, dtype=bool) if self.movable is None else np.asarray(self.movable, dtype=bool).reshape(ny)
        object.__setattr__(self, "movable", mov)
        if not 0.0 < self.radius < 0.5:
            raise ValueError(f"sensor radius must lie in (0, 0.5), got {self.radius}")

    @property
    def ny(self) -> int:
        return self.positions.shape[0]

    @property
    def movable_coords(self) -> list[tuple[int, int]]:
        """(sensor, axis) pairs of the movable scalar coordinates."""
        return [(i, a) for i in np.flatnonzero(self.movable) for a in (0, 1)]

    @property
    def movable_positions(self) -> np.ndarray:
        return self.positions[self.movable]

    def with_positions(self, positions) -> "SensorArray":
        return dataclasses.replace(self, positions=np.asarray(positions, dtype=float))

    def with_movable_positions(self, mov_positions) -> "SensorArray":
        pos = self.positions.copy()
        pos[self.movable] = np.asarray(mov_positions, dtype=float).reshape(-1, 2)
        return self.with_positions(pos)


def observation_matrix(sensors: SensorArray, ks: WaveNumberSet):
    """Real-basis disc-average rows C (ny, n) and their position derivatives.

    Returns ``(C, dC)`` with ``dC`` of shape (ny, 2, n): dC[i, a] = dC_i/do_{i,a}.
    """
    kp = ks.angular
    g = _bessel_factor(np.hypot(kp[:, 0], kp[:, 1]) * sensors.radius)
    phase = sensors.positions @ kp.T  # (ny, m)
    cos, sin = g * np.cos(phase), g * np.sin(phase)
    ny, n, off = sensors.ny, ks.n, ks.offset
    C = np.empty((ny, n))
    dC = np.zeros((ny, 2, n))
    if ks.include_constant:
        C[:, 0] = 1.0
    C[:, off::2] = cos
    C[:, off + 1::2] = sin
    for a in (0, 1):
        dC[:, a, off::2] = -sin * kp[:, a]
        dC[:, a, off + 1::2] = cos * kp[:, a]
    return C, dC


# --------------------------------------------------------------------------
# weighting matrices


def weighting_matrix_B(b_field, ks: WaveNumberSet, grid: int = 128) -> np.ndarray:
    """Galerkin matrix of multiplication by ``b_field`` (callable on (N,2) points).

    B[j, k] is the coefficient on basis j of the projection of b * phi_k,
    computed with a uniform-grid rule (exact trapezoid for periodic integrands).
    """
    h = 1.0 / grid
    xs = np.arange(grid) * h
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    b = np.asarray(b_field(pts), dtype=float).reshape(-1)
    if not np.all(np.isfinite(b)):
        raise AssemblyError("b_field is not finite on the quadrature grid")
    E = basis_matrix(pts, ks)
    gram_inv = np.full(ks.n, 2.0)
    if ks.include_constant:
        gram_inv[0] = 1.0
    return gram_inv[:, None] * (E.T @ (b[:, None] * E)) * h * h


def target_weight(targets, ks: WaveNumberSet) -> np.ndarray:
    """M = E^T E with E the basis evaluated at the target points."""
    E = basis_matrix(targets, ks)
    return E.T @ E


def resolve_weight(M_spec, ks: WaveNumberSet) -> np.ndarray:
    """M_spec is ``"identity"``, ``("targets", points)`` or an explicit matrix."""
    if isinstance(M_spec, str):
        if M_spec != "identity":
            raise AssemblyError(f"unknown weighting spec {M_spec!r}")
        return np.eye(ks.n)
    if isinstance(M_spec, tuple) and len(M_spec) == 2 and M_spec[0] == "targets":
        return target_weight(M_spec[1], ks)
    M = np.asarray(M_spec, dtype=float)
    if M.shape != (ks.n, ks.n):
        raise AssemblyError(f"weighting matrix must be {ks.n}x{ks.n}")
    M = 0.5 * (M + M.T)
    if np.linalg.eigvalsh(M).min() < -1e-10 * max(1.0, np.abs(M).max()):
        raise AssemblyError("weighting matrix is not positive semi-definite")
    return M


# --------------------------------------------------------------------------
# system assembly


@dataclass
class SystemMatrices:
    """Assembled system and its derivative stacks.

    ``theta_names`` lists the coordinates the theta-stacks refer to, and
    ``lam``/``dlam`` give the eigenvalues of A (in the fixed basis ``V``) and
    their derivatives, which the transition kernel uses.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    C: np.ndarray
    bias: np.ndarray
    R: np.ndarray
    M: np.ndarray
    theta_names: list[str]
    dA: np.ndarray  # (p, n, n)
    dQ: np.ndarray
    dC: np.ndarray  # (p, ny, n), zero for this model
    dR: np.ndarray  # (p, ny, ny)
    dbias: np.ndarray  # (p, ny)
    dC_do: np.ndarray  # (n_mov_coords, ny, n)
    lam: np.ndarray
    dlam: np.ndarray  # (p, n)
    V: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def ny(self) -> int:
        return self.C.shape[0]


def _raw_spectrum(ks: WaveNumberSet, rho0: float):
    """Unnormalised real-basis noise variances and their rho0-derivatives.

    A complex mode driven by eta_k (dz_re + i dz_im) gives cos and sin
    coefficients (twice the real and imaginary parts) variance 4 eta_k^2 each;
    the constant mode is driven by a single real Brownian motion.
    """
    kp = ks.angular
    kk = np.concatenate([[0.0] if ks.include_constant else [], np.repeat(np.sum(kp * kp, axis=1), 2)])
    weight = np.concatenate([[1.0] if ks.include_constant else [], np.full(2 * len(ks.ks), 4.0)])
    inv = 1.0 / rho0 ** 2
    base = (kk + inv) ** -2 / TWO_PI ** 2
    raw = weight * base
    # d/drho0 of (kk + rho0^-2)^-2 = 4 rho0^-3 (kk + rho0^-2)^-3
    draw = weight * 4.0 * rho0 ** -3 * (kk + inv) ** -3 / TWO_PI ** 2
    return raw, draw


def noise_variances(theta: ModelParams, ks: WaveNumberSet, normalize: str = "marginal"):
    """Diagonal of Q and its derivatives in (rho0, sigma2).

    ``normalize="marginal"`` scales the truncated spectrum so that the noise
    field has pointwise incremental variance sigma2 per unit time;
    ``"literal"`` uses sigma2 * raw directly.
    """
    raw, draw = _raw_spectrum(ks, theta.rho0)
    if normalize == "literal":
        q = theta.sigma2 * raw
        return q, theta.sigma2 * draw, raw
    if normalize != "marginal":
        raise AssemblyError(f"unknown spectrum normalisation {normalize!r}")
    # pointwise variance of sum q_j phi_j^2 averaged is q_const + sum over pairs of q_cos
    pw = np.ones_like(raw)
    if len(ks.ks):
        pw[ks.offset + 1::2] = 0.0
    total = pw @ raw
    dtotal = pw @ draw
    shape = raw / total
    dshape = draw / total - raw * dtotal / total ** 2
    return theta.sigma2 * shape, theta.sigma2 * dshape, shape


def assemble_system(
    theta: ModelParams,
    sensors: SensorArray,
    ks: WaveNumberSet,
    *,
    B=None,
    M_spec="identity",
    M=None,
    active=None,
    normalize: str = "marginal",
) -> SystemMatrices:
    """Build (A, B, Q, C, bias, R, M) and analytic derivative stacks.

    ``B`` is a precomputed Galerkin weighting matrix (see
    :func:`weighting_matrix_B`), identity when omitted. ``active`` selects the
    theta coordinates for the derivative stacks (all when ``None``).
    ``M`` may be passed precomputed to skip resolving ``M_spec``.
    """
    n, ny = ks.n, sensors.ny
    if np.max(sensors.noise_class, initial=0) >= len(theta.tau2):
        raise AssemblyError("sensor noise class exceeds number of tau2 classes")
    if np.max(sensors.bias_class, initial=0) >= len(theta.beta):
        raise AssemblyError("sensor bias class exceeds number of beta classes")
    names = list(theta.names if active is None else active)
    valid = set(theta.names)
    for nm in names:
        if nm not in valid:
            raise AssemblyError(f"unknown active coordinate {nm!r}")

    kp = ks.angular
    sig, d_rho1, d_gamma, d_alpha = _diffusion_derivatives(theta.rho1, theta.gamma_aniso, theta.alpha)
    mu = np.asarray(theta.mu)
    quad = np.einsum("mi,ij,mj->m", kp, sig, kp)
    re = -(quad + theta.zeta)
    im = -(kp @ mu)
    lam_k = re + 1j * im

    def pairs(x):
        return np.column_stack([x, np.conj(x)]).ravel()

    lam = pairs(lam_k)
    if ks.include_constant:
        lam = np.concatenate([[-theta.zeta + 0j], lam])

    A = np.zeros((n, n))
    if ks.include_constant:
        A[0, 0] = -theta.zeta
    for j in range(len(ks.ks)):
        c, s = ks.cos_index(j), ks.sin_index(j)
        A[c, c] = A[s, s] = re[j]
        A[c, s] = im[j]
        A[s, c] = -im[j]

    q, dq, _ = noise_variances(theta, ks, normalize)
    Q = np.diag(q)
    B = np.eye(n) if B is None else np.asarray(B, dtype=float)
    if B.shape != (n, n):
        raise AssemblyError(f"B must be {n}x{n}")

    C, dCo = observation_matrix(sensors, ks)
    tau2 = np.asarray(theta.tau2)
    beta = np.asarray(theta.beta)
    R = np.diag(tau2[sensors.noise_class])
    bias = beta[sensors.bias_class]

    if M is None:
        M = resolve_weight(M_spec, ks)

    p = len(names)
    dlam = np.zeros((p, n), dtype=complex)
    dQ = np.zeros((p, n, n))
    dR = np.zeros((p, ny, ny))
    dbias = np.zeros((p, ny))
    dre = {
        "zeta": -np.ones(len(ks.ks)),
        "rho1": -np.einsum("mi,ij,mj->m", kp, d_rho1, kp),
        "gamma": -np.einsum("mi,ij,mj->m", kp, d_gamma, kp),
        "alpha": -np.einsum("mi,ij,mj->m", kp, d_alpha, kp),
    }
    dim = {"mu_x": -kp[:, 0], "mu_y": -kp[:, 1]}
    for idx, nm in enumerate(names):
        if nm in dre or nm in dim:
            dk = dre[nm] + 0j if nm in dre else 1j * dim[nm]
            row = pairs(dk)
            if ks.include_constant:
                row = np.concatenate([[-1.0 + 0j if nm == "zeta" else 0j], row])
            dlam[idx] = row
        elif nm == "rho0":
            dQ[idx] = np.diag(dq)
        elif nm == "sigma2":
            dQ[idx] = np.diag(q / theta.sigma2)
        elif nm.startswith("tau2_"):
            c = int(nm[5:]) - 1
            dR[idx] = np.diag((sensors.noise_class == c).astype(float))
        elif nm.startswith("beta_"):
            c = int(nm[5:]) - 1
            dbias[idx] = (sensors.bias_class == c).astype(float)
    V = eigenbasis(ks)
    dA = np.real((V[None] * dlam[:, None, :]) @ V.conj().T)

    mov = sensors.movable_coords
    dC_do = np.zeros((len(mov), ny, n))
    for idx, (i, a) in enumerate(mov):
        dC_do[idx, i] = dCo[i, a]

    return SystemMatrices(
        A=A, B=B, Q=Q, C=C, bias=bias, R=R, M=M, theta_names=names,
        dA=dA, dQ=dQ, dC=np.zeros((p, ny, n)), dR=dR, dbias=dbias, dC_do=dC_do,
        lam=lam, dlam=dlam, V=V,
    )
