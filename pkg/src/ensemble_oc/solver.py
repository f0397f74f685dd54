"""Damped forward-backward sweep for the finite-support average-cost problem.

Each sweep propagates the trajectory ensemble forward, integrates the
adjoints backward from penalty-split terminal values, maximizes the averaged
Hamiltonian interval by interval, and applies a damped control update that
must not increase the penalized merit.  The sweep's fixed point is exactly
the stationarity certificate the ``verify`` module checks, so "converged"
always means "certificate residuals below target", never global optimality.

Terminal constraints are enforced by a quadratic penalty on the averaged
constraint distance; an outer loop raises the penalty geometrically until
the averaged residual meets tolerance.  The cost multiplier is lam =
1/(1 + penalty), so the terminal costate carries weight lam on the cost
gradient and (1 - lam) on the constraint term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ensemble_oc.adjoint import (
    CostateEnsemble,
    averaged_hamiltonian,
    backward_adjoint_ensemble,
    maximize_hamiltonian,
)
from ensemble_oc.measure import FiniteSupportMeasure, ProbabilityMeasure, discretize
from ensemble_oc.system import (
    ControlFunction,
    ControlSet,
    ControlSystem,
    DynamicsBlowUp,
    TimeGrid,
    TrajectoryEnsemble,
    average_cost,
    propagate_ensemble,
)

__all__ = [
    "SolveConfig",
    "SolveResult",
    "EnumerationBudgetExceeded",
    "solve",
    "brute_force_oracle",
    "refine",
]

# accept a trial only if the recorded merit strictly decreases beyond rounding
_ACCEPT_EPS = 1e-16


class EnumerationBudgetExceeded(RuntimeError):
    """Brute-force enumeration would exceed the configured budget."""


@dataclass
class SolveConfig:
    """Sweep parameters.  ``initial_control`` may be a scalar, one control
    vector, or a full (n_steps, m) array; defaults to the box midpoint or the
    first finite control value."""

    n_steps: int = 200
    level: int = 6
    max_sweeps: int = 500
    damping_init: float = 1.0
    damping_shrink: float = 0.5
    min_damping: float = 1e-10
    merit_tol: float = 1e-9
    penalty_init: float = 1.0
    penalty_growth: float = 10.0
    max_outer: int = 12
    constraint_tol: float = 1e-6
    maximality_target: float = 1e-6
    initial_control: object | None = None
    hamiltonian_grid: int = 33
    hamiltonian_tol: float = 1e-8

    def __post_init__(self):
        if min(self.n_steps, self.level, self.max_sweeps, self.max_outer) < 1:
            raise ValueError("grid size, level, and iteration caps must be positive")
        if not (0.0 < self.damping_init <= 1.0 and 0.0 < self.damping_shrink <= 1.0):
            raise ValueError("damping factors must lie in (0, 1]")
        if min(self.merit_tol, self.penalty_init, self.penalty_growth,
               self.constraint_tol, self.maximality_target, self.min_damping) <= 0:
            raise ValueError("tolerances and penalty parameters must be positive")


@dataclass
class SolveResult:
    control: ControlFunction
    ensemble: TrajectoryEnsemble | None
    costates: CostateEnsemble | None
    cost: float
    cost_history: list[float]
    penalty_history: list[float]
    constraint_residual: float
    maximality_residual: float
    status: str                    # "converged" | "max-iters" | "error"
    message: str = ""
    sweeps: int = 0
    level: int = 0

    @property
    def lam(self) -> float:
        return self.costates.lam if self.costates is not None else 1.0


def _initial_control(sys: ControlSystem, grid: TimeGrid, cfg: SolveConfig) -> ControlFunction:
    cset = sys.control_set
    init = cfg.initial_control
    if init is None:
        values = np.tile(cset.default_control(), (grid.n_steps, 1))
    else:
        init = np.asarray(init, dtype=float)
        if init.ndim == 0:
            init = np.full(sys.control_dim, float(init))
        if init.ndim == 1:
            values = np.tile(init, (grid.n_steps, 1))
        else:
            if init.shape[0] != grid.n_steps:
                raise ValueError("initial control array must match the grid")
            values = init.copy()
    return ControlFunction(grid, values).projected(cset)


def _is_constrained(sys: ControlSystem, mu_l: FiniteSupportMeasure) -> bool:
    for omega in mu_l.atoms:
        cons = sys.constraint_for(omega)
        if cons is not None and cons.kind != "none":
            return True
    return False


def _merit(sys: ControlSystem, ens: TrajectoryEnsemble, rho: float) -> float:
    total = 0.0
    for j, (omega, w) in enumerate(zip(ens.measure.atoms, ens.measure.weights)):
        x_T = ens.states[j, -1]
        val = float(sys.g(x_T, omega))
        if rho > 0.0:
            cons = sys.constraint_for(omega)
            if cons is not None:
                dd = cons.distance(x_T)
                val += 0.5 * rho * dd * dd
        total += w * val
    return total


def _avg_constraint(sys: ControlSystem, ens: TrajectoryEnsemble) -> float:
    total = 0.0
    for j, (omega, w) in enumerate(zip(ens.measure.atoms, ens.measure.weights)):
        cons = sys.constraint_for(omega)
        if cons is not None:
            total += w * cons.distance(ens.states[j, -1])
    return total


def _sweep_direction(sys: ControlSystem, ens: TrajectoryEnsemble,
                     costates: CostateEnsemble, u: ControlFunction,
                     cfg: SolveConfig):
    """Per-interval Hamiltonian maximizers, improvement gaps, and the
    normalized maximality residual.  Exactly-flat intervals keep the current
    control value (deterministic handling of singular arcs)."""
    n_steps = u.grid.n_steps
    u_plus = np.empty_like(u.values)
    gains = np.empty(n_steps)
    normal = costates.lam + costates.sup_norm
    tie_tol = 1e-14 * max(normal, 1e-300)
    for k in range(n_steps):
        h_cur = averaged_hamiltonian(sys, ens, costates, k, u.values[k])
        u_star, v = maximize_hamiltonian(sys, ens, costates, k,
                                         cfg.hamiltonian_grid, cfg.hamiltonian_tol)
        gain = v - h_cur
        if gain <= tie_tol:
            u_plus[k] = u.values[k]
            gains[k] = max(gain, 0.0)
        else:
            u_plus[k] = u_star
            gains[k] = gain
    residual = float(np.max(gains)) / max(normal, 1e-300)
    return u_plus, gains, residual


def _try_update(sys: ControlSystem, mu_l: FiniteSupportMeasure, u: ControlFunction,
                u_plus: np.ndarray, gains: np.ndarray, merit: float, rho: float,
                cfg: SolveConfig):
    """Damped update: blend toward the maximizers (box) or switch a
    best-gains fraction of intervals (finite), halving the step on merit
    increase.  Returns (control, ensemble, merit) or None when no trial
    improves."""
    grid = u.grid
    box = sys.control_set.kind == "box"
    changed = np.flatnonzero(np.any(u_plus != u.values, axis=1))
    if len(changed) == 0:
        return None
    order = changed[np.argsort(-gains[changed], kind="stable")]
    threshold = _ACCEPT_EPS * max(1.0, abs(merit))

    s = cfg.damping_init
    while s >= cfg.min_damping:
        if box:
            trial_values = (1.0 - s) * u.values + s * u_plus
        else:
            take = order[: max(1, int(np.ceil(s * len(order))))]
            trial_values = u.values.copy()
            trial_values[take] = u_plus[take]
        trial = ControlFunction(grid, trial_values)
        try:
            ens = propagate_ensemble(sys, trial, mu_l)
            m = _merit(sys, ens, rho)
        except DynamicsBlowUp:
            m = np.inf
        if m < merit - threshold:
            return trial, ens, m
        s *= cfg.damping_shrink

    if not box:
        # last resort: scan single-interval candidate switches in fixed order
        values = sys.control_set.values
        for k in range(grid.n_steps):
            for cand in values:
                if np.array_equal(cand, u.values[k]):
                    continue
                trial_values = u.values.copy()
                trial_values[k] = cand
                trial = ControlFunction(grid, trial_values)
                try:
                    ens = propagate_ensemble(sys, trial, mu_l)
                    m = _merit(sys, ens, rho)
                except DynamicsBlowUp:
                    continue
                if m < merit - threshold:
                    return trial, ens, m
    return None


def solve(sys: ControlSystem, mu, cfg: SolveConfig | None = None) -> SolveResult:
    """Solve the average-cost problem on the discretized measure.

    The measure is discretized at ``cfg.level`` (finite-support measures are
    used as given).  Sweeps stop when the normalized maximality residual
    meets the target; with terminal constraints, an outer loop then raises
    the penalty until the averaged constraint residual meets tolerance.
    """
    cfg = cfg or SolveConfig()
    if isinstance(mu, FiniteSupportMeasure):
        mu_l = mu
    else:
        mu_l = discretize(mu, cfg.level)
    grid = TimeGrid(cfg.n_steps, sys.horizon)
    u = _initial_control(sys, grid, cfg)

    constrained = _is_constrained(sys, mu_l)
    rho = cfg.penalty_init if constrained else 0.0
    n_outer = cfg.max_outer if constrained else 1

    history: list[float] = []
    penalties: list[float] = []
    ens = costates = None
    residual = np.inf
    constraint_residual = np.inf
    total_sweeps = 0
    status, message = "max-iters", ""

    try:
        for outer in range(n_outer):
            lam = 1.0 / (1.0 + rho) if constrained else 1.0
            inner_done = False
            for sweep in range(cfg.max_sweeps):
                total_sweeps += 1
                ens = propagate_ensemble(sys, u, mu_l)
                merit = _merit(sys, ens, rho)
                if sweep == 0:
                    history.append(merit)
                    penalties.append(rho)
                costates = backward_adjoint_ensemble(sys, ens, lam)
                u_plus, gains, residual = _sweep_direction(sys, ens, costates, u, cfg)
                if residual <= cfg.maximality_target:
                    inner_done = True
                    break
                update = _try_update(sys, mu_l, u, u_plus, gains, merit, rho, cfg)
                if update is None:
                    status = "error"
                    message = ("no merit improvement at minimal damping "
                               f"(maximality residual {residual:.3g})")
                    break
                u, ens, merit = update
                history.append(merit)
                penalties.append(rho)
            if status == "error":
                break
            if not inner_done:
                status = "max-iters"
                message = f"sweep budget exhausted at maximality residual {residual:.3g}"
                break
            if not constrained:
                status = "converged"
                break
            constraint_residual = _avg_constraint(sys, ens)
            if constraint_residual <= cfg.constraint_tol:
                status = "converged"
                break
            if outer == n_outer - 1:
                status = "max-iters"
                message = ("penalty ladder exhausted at averaged constraint "
                           f"residual {constraint_residual:.3g}")
            else:
                rho *= cfg.penalty_growth
    except DynamicsBlowUp as exc:
        status, message = "error", str(exc)
    except ValueError as exc:
        status, message = "error", str(exc)

    if ens is None:
        cost = np.nan
        constraint_residual = np.nan
    else:
        cost = average_cost(sys, ens)
        constraint_residual = _avg_constraint(sys, ens)
    return SolveResult(
        control=u,
        ensemble=ens,
        costates=costates,
        cost=cost,
        cost_history=history,
        penalty_history=penalties,
        constraint_residual=constraint_residual,
        maximality_residual=float(residual),
        status=status,
        message=message,
        sweeps=total_sweeps,
        level=mu_l.level,
    )


def brute_force_oracle(sys: ControlSystem, mu_l: FiniteSupportMeasure,
                       grid: TimeGrid, finite_controls, rho: float = 0.0):
    """Exhaustive enumeration of piecewise-constant control sequences.

    Independent of the sweep: prefix trees share forward propagation, every
    leaf evaluates the penalized average cost exactly, ties resolve to the
    lexicographically first sequence.  The budget |U|^n_steps is capped at
    n_steps <= 8 and |U| <= 5.
    """
    if isinstance(finite_controls, ControlSet):
        if finite_controls.kind != "finite":
            raise ValueError("oracle requires a finite control set")
        values = finite_controls.values
    else:
        values = np.atleast_2d(np.asarray(finite_controls, dtype=float))
    n_vals, n_steps = len(values), grid.n_steps
    if n_steps > 8 or n_vals > 5:
        raise EnumerationBudgetExceeded(
            f"enumeration budget exceeded: |U|^n_steps = {n_vals}^{n_steps}")

    from ensemble_oc.system import _rk4_step

    nodes = grid.nodes
    dt = grid.dt
    atoms = mu_l.atoms
    weights = mu_l.weights
    best_cost = np.inf
    best_seq: np.ndarray | None = None
    seq = np.zeros(n_steps, dtype=int)
    x_init = np.tile(sys.x0, (len(atoms), 1))

    def leaf_cost(states: np.ndarray) -> float:
        total = 0.0
        for j, (omega, w) in enumerate(zip(atoms, weights)):
            val = float(sys.g(states[j], omega))
            if rho > 0.0:
                cons = sys.constraint_for(omega)
                if cons is not None:
                    dd = cons.distance(states[j])
                    val += 0.5 * rho * dd * dd
            total += w * val
        return total

    def descend(k: int, states: np.ndarray):
        nonlocal best_cost, best_seq
        if k == n_steps:
            cost = leaf_cost(states)
            if cost < best_cost:
                best_cost = cost
                best_seq = seq.copy()
            return
        for vi in range(n_vals):
            seq[k] = vi
            nxt = np.empty_like(states)
            ok = True
            for j, omega in enumerate(atoms):
                nxt[j] = _rk4_step(sys.f, nodes[k], states[j], values[vi], omega, dt)
                if not np.all(np.isfinite(nxt[j])):
                    ok = False
                    break
            if ok:
                descend(k + 1, nxt)

    descend(0, x_init)
    if best_seq is None:
        raise DynamicsBlowUp("every enumerated control sequence blew up")
    control = ControlFunction(grid, values[best_seq])
    return control, float(best_cost)


def refine(sys: ControlSystem, mu: ProbabilityMeasure, cfg: SolveConfig,
           levels: Sequence[int]) -> list[SolveResult]:
    """Solve at increasing discretization levels, warm-starting each level
    with the previous control."""
    results: list[SolveResult] = []
    warm = cfg.initial_control
    for lvl in sorted(int(l) for l in levels):
        level_cfg = replace(cfg, level=lvl, initial_control=warm)
        res = solve(sys, mu, level_cfg)
        results.append(res)
        warm = res.control.values.copy()
    return results
