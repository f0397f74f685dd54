"""Builtin dynamics/cost registries and the registered benchmark problems.

Problem files name dynamics and costs from these registries rather than
embedding expressions; benchmarks bundle a full system, measure, and solve
configuration together with a known-answer record used by the CLI to grade
a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ensemble_oc.measure import ProbabilityMeasure
from ensemble_oc.solver import SolveConfig
from ensemble_oc.system import (
    ConstraintSet,
    ControlSet,
    ControlSystem,
    RegularityData,
)

__all__ = [
    "DynamicsSpec",
    "CostSpec",
    "BenchmarkEntry",
    "DYNAMICS",
    "COSTS",
    "BENCHMARKS",
    "make_dynamics",
    "make_cost",
    "get_benchmark",
]


@dataclass
class DynamicsSpec:
    f: Callable
    jac_x: Callable | None
    description: str


@dataclass
class CostSpec:
    g: Callable
    grad_g: Callable | None
    description: str


def _integrator(params: dict, n: int, m: int) -> DynamicsSpec:
    if n != m:
        raise ValueError("integrator dynamics need control_dim == state_dim")

    def f(t, x, u, omega):
        return np.asarray(u, dtype=float)

    def jac(t, x, u, omega):
        return np.zeros((n, n))

    return DynamicsSpec(f, jac, "x' = u")


def _scaled_drift(params: dict, n: int, m: int) -> DynamicsSpec:
    if n != m:
        raise ValueError("scaled-drift dynamics need control_dim == state_dim")

    def f(t, x, u, omega):
        return float(omega[0]) * np.asarray(u, dtype=float)

    def jac(t, x, u, omega):
        return np.zeros((n, n))

    return DynamicsSpec(f, jac, "x' = omega * u")


def _linear(params: dict, n: int, m: int) -> DynamicsSpec:
    A = np.asarray(params.get("A", np.zeros((n, n))), dtype=float).reshape(n, n)
    B = np.asarray(params.get("B", np.eye(n, m)), dtype=float).reshape(n, m)

    def f(t, x, u, omega):
        return A @ np.asarray(x, dtype=float) + B @ np.asarray(u, dtype=float)

    def jac(t, x, u, omega):
        return A

    return DynamicsSpec(f, jac, "x' = A x + B u")


DYNAMICS: dict[str, Callable[[dict, int, int], DynamicsSpec]] = {
    "integrator": _integrator,
    "scaled-drift": _scaled_drift,
    "linear": _linear,
}


def _neg_abs_gap(params: dict, n: int) -> CostSpec:
    if n != 1:
        raise ValueError("neg-abs-gap cost is scalar")

    def g(x, omega):
        return -abs(float(x[0]) - float(omega[0]))

    def grad(x, omega):
        gap = float(x[0]) - float(omega[0])
        if gap == 0.0:
            raise ValueError("terminal gradient unavailable; supply subgradient selection")
        return np.array([-np.sign(gap)])

    return CostSpec(g, grad, "g = -|x - omega|")


def _quadratic(params: dict, n: int) -> CostSpec:
    target = np.asarray(params.get("target", np.zeros(n)), dtype=float).reshape(n)

    def g(x, omega):
        d = np.asarray(x, dtype=float) - target
        return 0.5 * float(d @ d)

    def grad(x, omega):
        return np.asarray(x, dtype=float) - target

    return CostSpec(g, grad, "g = 0.5 |x - target|^2")


def _quadratic_omega_gap(params: dict, n: int) -> CostSpec:
    scale = float(params.get("scale", 1.0))

    def g(x, omega):
        d = np.asarray(x, dtype=float) - scale * np.asarray(omega, dtype=float)[:n]
        return 0.5 * float(d @ d)

    def grad(x, omega):
        return np.asarray(x, dtype=float) - scale * np.asarray(omega, dtype=float)[:n]

    return CostSpec(g, grad, "g = 0.5 |x - scale * omega|^2")


COSTS: dict[str, Callable[[dict, int], CostSpec]] = {
    "neg-abs-gap": _neg_abs_gap,
    "quadratic": _quadratic,
    "quadratic-omega-gap": _quadratic_omega_gap,
}


def make_dynamics(name: str, params: dict, n: int, m: int) -> DynamicsSpec:
    if name not in DYNAMICS:
        raise ValueError(f"unknown builtin dynamics {name!r}; available: "
                         + ", ".join(sorted(DYNAMICS)))
    return DYNAMICS[name](params or {}, n, m)


def make_cost(name: str, params: dict, n: int) -> CostSpec:
    if name not in COSTS:
        raise ValueError(f"unknown builtin cost {name!r}; available: "
                         + ", ".join(sorted(COSTS)))
    return COSTS[name](params or {}, n)


@dataclass
class BenchmarkEntry:
    """Registered problem plus its known-answer record.

    ``known`` carries the reference optimal cost with its tolerance, short
    descriptions of the optimal control and costate, and a provenance tag
    ("paper" for values reported by the source material, "analytic" for
    values derived in closed form)."""

    name: str
    description: str
    build: Callable[[], tuple[ControlSystem, ProbabilityMeasure, SolveConfig]]
    known: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.known.get("provenance") not in ("paper", "analytic"):
            raise ValueError("known-answer record needs a provenance tag")


def _build_paper_example():
    dyn = make_dynamics("integrator", {}, 1, 1)
    cost = make_cost("neg-abs-gap", {}, 1)
    sys = ControlSystem(
        state_dim=1, control_dim=1, horizon=1.0, x0=np.array([0.0]),
        f=dyn.f, jac_x=dyn.jac_x, g=cost.g, grad_g=cost.grad_g,
        control_set=ControlSet("box", lo=[-1.0], hi=[1.0]),
        regularity=RegularityData(c=1.0, k_f=0.0, k_g=1.0, M=2.0, delta=1.0),
    )
    mu = ProbabilityMeasure.uniform([[-1.0, 1.0]])
    cfg = SolveConfig(initial_control=0.1)
    return sys, mu, cfg


def _build_omega_free_lq():
    dyn = make_dynamics("integrator", {}, 1, 1)
    cost = make_cost("quadratic", {"target": [1.0]}, 1)
    sys = ControlSystem(
        state_dim=1, control_dim=1, horizon=1.0, x0=np.array([0.0]),
        f=dyn.f, jac_x=dyn.jac_x, g=cost.g, grad_g=cost.grad_g,
        control_set=ControlSet("box", lo=[-10.0], hi=[10.0]),
        regularity=RegularityData(c=10.0, k_f=0.0, k_g=12.0, M=61.0, delta=1.0),
    )
    mu = ProbabilityMeasure.from_atoms([[0.0]], [1.0])
    return sys, mu, SolveConfig()


def _scaled_drift_system() -> ControlSystem:
    dyn = make_dynamics("scaled-drift", {}, 1, 1)
    cost = make_cost("quadratic-omega-gap", {"scale": 1.0}, 1)
    return ControlSystem(
        state_dim=1, control_dim=1, horizon=1.0, x0=np.array([0.0]),
        f=dyn.f, jac_x=dyn.jac_x, g=cost.g, grad_g=cost.grad_g,
        control_set=ControlSet("box", lo=[-1.0], hi=[1.0]),
        regularity=RegularityData(c=1.0, k_f=0.0, k_g=3.0, M=2.0, delta=1.0,
                                  k_omega=1.0),
    )


def _build_scaled_drift():
    mu = ProbabilityMeasure.from_atoms([[-1.0], [1.0]], [0.5, 0.5])
    return _scaled_drift_system(), mu, SolveConfig()


def _build_point_target():
    sys = _scaled_drift_system()
    # each parameter branch must land on its own target 0.5 * omega
    sys.constraint = lambda omega: ConstraintSet("point", target=0.5 * np.asarray(omega))
    mu = ProbabilityMeasure.from_atoms([[-1.0], [1.0]], [0.5, 0.5])
    cfg = SolveConfig(maximality_target=5e-6, constraint_tol=6e-6, max_outer=14,
                      min_damping=1e-13)
    return sys, mu, cfg


BENCHMARKS: dict[str, BenchmarkEntry] = {
    "paper-example": BenchmarkEntry(
        name="paper-example",
        description="x' = u on [0,1], u in [-1,1], average of -|x(1) - omega| "
                    "over uniform omega in [-1,1]",
        build=_build_paper_example,
        known={
            "cost": -1.0,
            "cost_tol": 5e-3,
            "control": "u constant at +1 (or the symmetric -1 branch)",
            "costate": "p identically 1 for every atom",
            "provenance": "paper",
        },
    ),
    "omega-free-lq": BenchmarkEntry(
        name="omega-free-lq",
        description="parameter-free x' = u, quadratic terminal cost; the "
                    "reachable optimum x(1) = 1 has zero cost",
        build=_build_omega_free_lq,
        known={
            "cost": 0.0,
            "cost_tol": 1e-6,
            "control": "any control integrating to 1; the sweep returns a constant",
            "costate": "p -> 0 at the interior optimum",
            "provenance": "analytic",
        },
    ),
    "scaled-drift": BenchmarkEntry(
        name="scaled-drift",
        description="x' = omega * u with atoms +-1: both branches want the "
                    "control to integrate to 1",
        build=_build_scaled_drift,
        known={
            "cost": 0.0,
            "cost_tol": 1e-6,
            "control": "u constant at 1",
            "costate": "p -> 0 at the optimum",
            "provenance": "analytic",
        },
    ),
    "point-target": BenchmarkEntry(
        name="point-target",
        description="x' = omega * u with atoms +-1 and per-branch point "
                    "targets 0.5 * omega enforced by the penalty ladder",
        build=_build_point_target,
        known={
            "cost": 0.125,
            "cost_tol": 1e-5,
            "control": "u constant near 0.5 (singular interior arc)",
            "costate": "terminal costates follow the cost/constraint split",
            "provenance": "analytic",
            "constraint_tol": 1e-5,
            "require_converged": False,
        },
    ),
}


def get_benchmark(name: str) -> BenchmarkEntry:
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; available: "
                         + ", ".join(sorted(BENCHMARKS)))
    return BENCHMARKS[name]
