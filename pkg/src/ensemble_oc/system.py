"""Parameterized control system, trajectory ensembles, and sensitivity bounds.

The state obeys ``x' = f(t, x, u(t), omega)`` from a shared initial state,
one trajectory per parameter atom, with a piecewise-constant control on a
uniform time grid integrated by classical RK4.  The module also carries the
metric apparatus used by the stationarity certificates: the discrete W^{1,1}
distance between state arrays, the control metric measuring the time set
where two controls differ, and the Gronwall/Filippov-type bound relating the
two.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from ensemble_oc.measure import FiniteSupportMeasure

__all__ = [
    "DynamicsBlowUp",
    "RegularityData",
    "ControlSet",
    "ConstraintSet",
    "TimeGrid",
    "ControlFunction",
    "ControlSystem",
    "TrajectoryEnsemble",
    "SensitivityReport",
    "propagate",
    "propagate_ensemble",
    "average_cost",
    "w11_distance",
    "ekeland_distance",
    "gronwall_bound",
    "sensitivity_check",
]


class DynamicsBlowUp(RuntimeError):
    """State or costate became non-finite during integration."""


@dataclass
class RegularityData:
    """Quantitative regularity constants of the problem data.

    ``k_f`` may be a constant or an integrable profile on [0, T].  ``k_g`` is
    the terminal-cost Lipschitz constant and must be >= 1.  ``k_omega``, when
    known, is a Lipschitz constant of the dynamics in the parameter (so the
    parameter modulus is k_omega * distance * T).
    """

    c: float
    k_f: float | Callable[[float], float] = 0.0
    k_g: float = 1.0
    M: float = 1.0
    delta: float = 1.0
    k_omega: float | None = None

    def __post_init__(self):
        if self.c < 0 or self.M < 0 or self.delta < 0:
            raise ValueError("regularity constants must be nonnegative")
        if not callable(self.k_f) and self.k_f < 0:
            raise ValueError("k_f must be nonnegative")
        if self.k_g < 1:
            raise ValueError("k_g must be >= 1")

    def kf_integral(self, horizon: float) -> float:
        if callable(self.k_f):
            ts = np.linspace(0.0, horizon, 4097)
            return float(np.trapezoid([self.k_f(t) for t in ts], ts))
        return float(self.k_f) * horizon


@dataclass
class ControlSet:
    """Admissible control values: a box [lo, hi]^m or a finite list."""

    kind: str  # "box" | "finite"
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "box":
            self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
            self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
            if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
                raise ValueError("box control set needs lo <= hi of equal shape")
        elif self.kind == "finite":
            self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
            if len(self.values) == 0:
                raise ValueError("finite control set must be nonempty")
        else:
            raise ValueError(f"unknown control set kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return len(self.lo) if self.kind == "box" else self.values.shape[1]

    def project(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return np.clip(u, self.lo, self.hi)
        dists = np.linalg.norm(self.values - u[None, :], axis=1)
        return self.values[int(np.argmin(dists))].copy()

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))
        return bool(np.any(np.all(np.abs(self.values - u[None, :]) <= tol, axis=1)))

    def default_control(self) -> np.ndarray:
        """Deterministic initial guess: box midpoint or first finite value."""
        if self.kind == "box":
            return 0.5 * (self.lo + self.hi)
        return self.values[0].copy()


@dataclass
class ConstraintSet:
    """Terminal constraint with a distance oracle and a normal-cone oracle.

    Kinds: "none" (whole space), "point" (singleton target), "box", and
    "halfspace" {x : a.x <= b}.
    """

    kind: str = "none"
    target: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    normal: np.ndarray | None = None
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "point", "box", "halfspace"):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "point":
            self.target = np.atleast_1d(np.asarray(self.target, dtype=float))
        elif self.kind == "box":
            self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
            self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        elif self.kind == "halfspace":
            self.normal = np.atleast_1d(np.asarray(self.normal, dtype=float))
            n = np.linalg.norm(self.normal)
            if n == 0:
                raise ValueError("halfspace normal must be nonzero")

    def distance(self, x: np.ndarray) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "none":
            return 0.0
        if self.kind == "point":
            return float(np.linalg.norm(x - self.target))
        if self.kind == "box":
            return float(np.linalg.norm(x - np.clip(x, self.lo, self.hi)))
        a = self.normal
        return float(max(0.0, (a @ x - self.offset) / np.linalg.norm(a)))

    def penalty_gradient(self, x: np.ndarray) -> np.ndarray:
        """Gradient of x -> 0.5 * distance(x)^2 (smooth for these kinds)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "none":
            return np.zeros_like(x)
        if self.kind == "point":
            return x - self.target
        if self.kind == "box":
            return x - np.clip(x, self.lo, self.hi)
        a = self.normal
        viol = max(0.0, float(a @ x - self.offset))
        return viol * a / float(a @ a)

    def normal_cone_distance(self, v: np.ndarray, x: np.ndarray,
                             active_tol: float = 1e-4) -> float:
        """Distance from ``v`` to the normal cone at ``x`` capped at the unit
        ball.  For a closed convex cone K, the projection onto K ∩ B is the
        radial clamp of the projection onto K."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "none":
            return float(np.linalg.norm(v))
        if self.distance(x) > active_tol:
            # x is not (numerically) in the set: the cone is empty, fall back
            # to the origin so the residual is the full vector norm
            return float(np.linalg.norm(v))
        if self.kind == "point":
            return float(max(0.0, np.linalg.norm(v) - 1.0))
        if self.kind == "halfspace":
            a = self.normal / np.linalg.norm(self.normal)
            if float(self.normal @ x - self.offset) < -active_tol:
                w = np.zeros_like(v)  # interior point: cone is {0}
            else:
                t = float(np.clip(v @ a, 0.0, None))
                w = t * a
        else:  # box
            w = np.zeros_like(v)
            at_hi = x >= self.hi - active_tol
            at_lo = x <= self.lo + active_tol
            w[at_hi] = np.maximum(v[at_hi], 0.0)
            w[at_lo & ~at_hi] = np.minimum(v[at_lo & ~at_hi], 0.0)
        norm_w = float(np.linalg.norm(w))
        if norm_w > 1.0:
            w = w / norm_w
        return float(np.linalg.norm(v - w))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with ``n_steps`` control intervals."""

    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1 or self.horizon <= 0:
            raise ValueError("grid needs n_steps >= 1 and horizon > 0")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


@dataclass
class ControlFunction:
    """Piecewise-constant control: value ``values[k]`` on [t_k, t_{k+1})."""

    grid: TimeGrid
    values: np.ndarray  # (n_steps, m)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_steps:
            raise ValueError("need one control value per grid interval")
        self.values = v

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "ControlFunction":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.n_steps, 1)))

    def projected(self, control_set: ControlSet) -> "ControlFunction":
        vals = np.stack([control_set.project(u) for u in self.values])
        return ControlFunction(self.grid, vals)


@dataclass
class ControlSystem:
    """Data of the average-cost problem: dynamics, terminal cost, control
    set, optional terminal constraints, and regularity constants.

    ``f(t, x, u, omega)`` returns the state velocity; ``jac_x`` its state
    Jacobian (finite differences are used when absent).  ``grad_g`` is the
    state gradient of the terminal cost and is required for smooth solving;
    it should raise if queried at a point where the cost is not
    differentiable.  ``constraint`` is a ConstraintSet, or a callable mapping
    a parameter point to one.
    """

    state_dim: int
    control_dim: int
    horizon: float
    x0: np.ndarray
    f: Callable
    g: Callable
    control_set: ControlSet
    jac_x: Callable | None = None
    grad_g: Callable | None = None
    constraint: object | None = None
    regularity: RegularityData | None = None
    fd_step: float = 1e-6

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if len(self.x0) != self.state_dim:
            raise ValueError("x0 must have state_dim components")

    def jacobian(self, t: float, x: np.ndarray, u: np.ndarray, omega) -> np.ndarray:
        if self.jac_x is not None:
            return np.asarray(self.jac_x(t, x, u, omega), dtype=float).reshape(
                self.state_dim, self.state_dim)
        h = self.fd_step * (1.0 + float(np.linalg.norm(x)))
        jac = np.empty((self.state_dim, self.state_dim))
        for i in range(self.state_dim):
            e = np.zeros(self.state_dim)
            e[i] = h
            fp = np.asarray(self.f(t, x + e, u, omega), dtype=float)
            fm = np.asarray(self.f(t, x - e, u, omega), dtype=float)
            jac[:, i] = (fp - fm) / (2.0 * h)
        return jac

    def terminal_gradient(self, x: np.ndarray, omega) -> np.ndarray:
        if self.grad_g is None:
            raise ValueError("terminal gradient unavailable; supply grad_g")
        return np.atleast_1d(np.asarray(self.grad_g(x, omega), dtype=float))

    def constraint_for(self, omega) -> ConstraintSet | None:
        if self.constraint is None:
            return None
        if isinstance(self.constraint, ConstraintSet):
            return self.constraint
        return self.constraint(omega)

    @property
    def has_constraint(self) -> bool:
        return self.constraint is not None


@dataclass
class TrajectoryEnsemble:
    """One trajectory per atom of the finite-support measure, all from x0."""

    states: np.ndarray            # (n_atoms, n_steps + 1, n)
    control: ControlFunction
    measure: FiniteSupportMeasure

    def __post_init__(self):
        if self.states.shape[0] != len(self.measure):
            raise ValueError("one trajectory per atom required")
        if self.states.shape[1] != self.control.grid.n_steps + 1:
            raise ValueError("trajectory length must match the grid")

    @property
    def terminal_states(self) -> np.ndarray:
        return self.states[:, -1, :]


def _rk4_step(f, t: float, x: np.ndarray, u: np.ndarray, omega, dt: float) -> np.ndarray:
    k1 = np.asarray(f(t, x, u, omega), dtype=float)
    k2 = np.asarray(f(t + 0.5 * dt, x + 0.5 * dt * k1, u, omega), dtype=float)
    k3 = np.asarray(f(t + 0.5 * dt, x + 0.5 * dt * k2, u, omega), dtype=float)
    k4 = np.asarray(f(t + dt, x + dt * k3, u, omega), dtype=float)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def propagate(sys: ControlSystem, u: ControlFunction, omega) -> np.ndarray:
    """RK4 solution of the state equation for one parameter point."""
    grid = u.grid
    dt = grid.dt
    nodes = grid.nodes
    x = np.empty((grid.n_steps + 1, sys.state_dim))
    x[0] = sys.x0
    for k in range(grid.n_steps):
        x[k + 1] = _rk4_step(sys.f, nodes[k], x[k], u.values[k], omega, dt)
        if not np.all(np.isfinite(x[k + 1])):
            raise DynamicsBlowUp(f"dynamics blow-up at t_{k + 1} = {nodes[k + 1]:.6g}")
    return x


def propagate_ensemble(sys: ControlSystem, u: ControlFunction,
                       mu_l: FiniteSupportMeasure) -> TrajectoryEnsemble:
    states = np.empty((len(mu_l), u.grid.n_steps + 1, sys.state_dim))
    for j, omega in enumerate(mu_l.atoms):
        try:
            states[j] = propagate(sys, u, omega)
        except DynamicsBlowUp as exc:
            raise DynamicsBlowUp(f"atom {j}: {exc}") from exc
    return TrajectoryEnsemble(states, u, mu_l)


def average_cost(sys: ControlSystem, ens: TrajectoryEnsemble) -> float:
    """Weighted average of the terminal cost over atoms, fixed-order sum."""
    total = 0.0
    for j, (omega, w) in enumerate(zip(ens.measure.atoms, ens.measure.weights)):
        total += w * float(sys.g(ens.states[j, -1], omega))
    return total


def w11_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Discrete W^{1,1} distance: initial gap plus total variation of the
    increment differences."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise ValueError("state arrays must have equal shape")
    head = float(np.linalg.norm(a[0] - b[0]))
    da = np.diff(a, axis=0)
    db = np.diff(b, axis=0)
    return head + float(np.sum(np.linalg.norm(da - db, axis=1)))


def ekeland_distance(u1: ControlFunction, u2: ControlFunction) -> float:
    """Measure of the time set where the two controls differ (exact
    per-interval value comparison)."""
    if u1.grid != u2.grid:
        raise ValueError("controls must share a grid")
    differ = np.any(u1.values != u2.values, axis=1)
    return float(np.count_nonzero(differ)) * u1.grid.dt


def gronwall_bound(sys: ControlSystem) -> float:
    """Trajectory sensitivity constant 2 c exp(integral of k_f)."""
    if sys.regularity is None:
        raise ValueError("regularity data required for the sensitivity bound")
    reg = sys.regularity
    return 2.0 * reg.c * float(np.exp(reg.kf_integral(sys.horizon)))


@dataclass
class SensitivityReport:
    per_atom_w11: np.ndarray
    ekeland: float
    bound: float
    slack: float
    violations: list[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def sensitivity_check(sys: ControlSystem, mu_l: FiniteSupportMeasure,
                      u1: ControlFunction, u2: ControlFunction) -> SensitivityReport:
    """Per atom, compare the W^{1,1} trajectory gap against the sensitivity
    bound ``beta * d(u1, u2)`` plus a grid slack of 4 c dt that accounts for
    the piecewise-constant discretization."""
    beta = gronwall_bound(sys)
    d = ekeland_distance(u1, u2)
    slack = 4.0 * sys.regularity.c * u1.grid.dt
    gaps = np.empty(len(mu_l))
    for j, omega in enumerate(mu_l.atoms):
        xa = propagate(sys, u1, omega)
        xb = propagate(sys, u2, omega)
        gaps[j] = w11_distance(xa, xb)
    bound = beta * d
    violations = [int(j) for j in np.flatnonzero(gaps > bound + slack)]
    return SensitivityReport(gaps, d, bound, slack, violations)
