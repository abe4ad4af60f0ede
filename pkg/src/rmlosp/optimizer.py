"""Two-timescale stochastic gradient recursion and step-size schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .spectral import ModelParams, ParameterSpace, SensorArray


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LearningSchedule:
    kind: str = "power"
    gamma0: float = 0.1
    epsilon: float = 0.75
    t0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("power", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.gamma0 > 0:
            raise ValueError("gamma0 must be > 0")
        if self.kind == "power" and not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if not self.t0 >= 1.0:
            raise ValueError("t0 must be >= 1")

    def __call__(self, t: float) -> float:
        return schedule_eval(self, t)


def schedule_eval(s: LearningSchedule, t: float) -> float:
    if s.kind == "constant":
        return s.gamma0
    return s.gamma0 * max(t, s.t0) ** -s.epsilon


# --------------------------------------------------------------------------
# Assumption A.1


@dataclass
class ScheduleCheck:
    name: str
    passed: bool
    detail: str


def _power_checks(label: str, s: LearningSchedule) -> list[ScheduleCheck]:
    if s.kind == "constant":
        return [
            ScheduleCheck(f"{label}.integral_diverges", True, "constant rate"),
            ScheduleCheck(f"{label}.square_integrable", False,
                          "tracking mode, A.1 violated: constant rate is not square integrable"),
        ]
    e = s.epsilon
    return [
        ScheduleCheck(f"{label}.integral_diverges", e <= 1.0, f"epsilon={e:g} <= 1"),
        ScheduleCheck(f"{label}.square_integrable", 2 * e > 1.0,
                      f"int t^-{2 * e:g} dt {'converges' if 2 * e > 1 else 'diverges'}"),
        ScheduleCheck(f"{label}.derivative_integrable", True, "monotone power law"),
        ScheduleCheck(f"{label}.rate_exponent", 4 * e > 1.0, f"epsilon={e:g} > 1/4"),
    ]


def schedule_validate(theta_schedules: dict, o_schedules: dict, slow: str = "theta") -> list[ScheduleCheck]:
    """Analytic step-size checks, plus timescale separation between the two families."""
    if slow not in ("theta", "o"):
        raise ValueError("slow must be 'theta' or 'o'")
    checks = []
    for label, s in list(theta_schedules.items()) + list(o_schedules.items()):
        checks += _power_checks(label, s)
    slow_s, fast_s = (theta_schedules, o_schedules) if slow == "theta" else (o_schedules, theta_schedules)
    if slow_s and fast_s:
        kinds = {s.kind for s in list(slow_s.values()) + list(fast_s.values())}
        if kinds == {"power"}:
            lo = min(s.epsilon for s in slow_s.values())
            hi = max(s.epsilon for s in fast_s.values())
            checks.append(ScheduleCheck("timescale_separation", lo > hi,
                                        f"slow min epsilon {lo:g} vs fast max epsilon {hi:g}"))
        else:
            checks.append(ScheduleCheck("timescale_separation", False,
                                        "tracking mode, A.1 violated: constant rates give no separation"))
    return checks


def tracking_mode(checks) -> bool:
    return any("tracking mode" in c.detail for c in checks)


# --------------------------------------------------------------------------
# iterate


@dataclass
class IterateState:
    t: float
    theta: ModelParams
    sensors: SensorArray
    active: list[str]
    last_g_theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    last_g_o: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _check_finite(g, names, family):
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NonFiniteGradientError(f"non-finite {family} gradient in coordinate {names[bad[0]]!r}")


def two_timescale_step(it: IterateState, g_theta, g_o, theta_schedules, o_schedules,
                       space: ParameterSpace, dt: float, *, freeze: str = "coordinate",
                       boundary: str = "wrap") -> IterateState:
    """One step of the coupled recursion.

    ``g_theta`` is the likelihood gradient increment (already multiplied by
    dt) and is ascended; ``g_o`` is the instantaneous placement gradient
    Tr[M dS/do] and is descended with weight dt. ``theta_schedules`` and
    ``o_schedules`` are sequences aligned with the coordinates, or a single
    schedule shared by all. ``freeze="all"`` zeroes the whole theta step when
    any coordinate would leave the box; ``boundary="freeze"`` keeps sensors
    inside [0, 1) instead of wrapping.
    """
    g_theta = np.asarray(g_theta, dtype=float)
    g_o = np.asarray(g_o, dtype=float)
    _check_finite(g_theta, it.active, "theta")
    mov = it.sensors.movable_coords
    _check_finite(g_o, [f"o_{i + 1}{'xy'[a]}" for i, a in mov], "placement")

    t = it.t
    gth = _rates(theta_schedules, len(g_theta), t)
    go = _rates(o_schedules, len(g_o), t)

    old = it.theta.values(it.active)
    new = old + gth * g_theta
    inside = np.array([space.contains(nm, v) for nm, v in zip(it.active, new)], dtype=bool)
    if freeze == "all":
        new = new if inside.all() else old
    elif freeze == "coordinate":
        new = np.where(inside, new, old)
    else:
        raise ValueError(f"unknown freeze rule {freeze!r}")
    theta = it.theta.with_values(it.active, new) if len(new) else it.theta

    sensors = it.sensors
    if len(g_o):
        pos = sensors.positions.copy()
        for c, (i, a) in enumerate(mov):
            v = pos[i, a] - go[c] * g_o[c] * dt
            if boundary == "freeze":
                v = pos[i, a] if not 0.0 <= v < 1.0 else v
            pos[i, a] = v
        sensors = sensors.with_positions(pos)
    return IterateState(t + dt, theta, sensors, it.active, g_theta, g_o)


def _rates(schedules, k, t):
    if k == 0:
        return np.zeros(0)
    if isinstance(schedules, LearningSchedule):
        return np.full(k, schedule_eval(schedules, t))
    if len(schedules) != k:
        raise ValueError(f"expected {k} schedules, got {len(schedules)}")
    return np.array([schedule_eval(s, t) for s in schedules])


def torus_distance(a, b) -> np.ndarray:
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 1.0
    d = np.minimum(d, 1.0 - d)
    return np.sqrt(np.sum(d * d, axis=-1))


def quadratic_sanity(x0, hessian, optimum, schedule: LearningSchedule, steps: int, dt: float = 1.0):
    """Run the descent recursion on a deterministic quadratic (for tests)."""
    x = np.asarray(x0, dtype=float).copy()
    H = np.asarray(hessian, dtype=float)
    t = 0.0
    for _ in range(steps):
        x -= schedule_eval(schedule, t) * (H @ (x - optimum)) * dt
        t += dt
    return x


__all__ = [
    "LearningSchedule", "schedule_eval", "ScheduleCheck", "schedule_validate", "tracking_mode",
    "IterateState", "two_timescale_step", "NonFiniteGradientError", "torus_distance",
]
