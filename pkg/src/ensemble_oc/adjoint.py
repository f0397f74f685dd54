"""Costate machinery: backward adjoint integration, the averaged Hamiltonian,
and its maximization over the control set.

The adjoint equation ``-p' = (d_x f)^T p`` is integrated backward by RK4
along a stored trajectory, with states at stage times taken as node
midpoints.  The averaged Hamiltonian is the weighted sum over atoms of
``p . f`` and is maximized per time node either exactly (finite control
sets) or by a coordinate grid plus golden-section refinement (boxes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ensemble_oc.system import (
    ControlFunction,
    ControlSystem,
    DynamicsBlowUp,
    TrajectoryEnsemble,
)

__all__ = [
    "CostateEnsemble",
    "backward_adjoint",
    "backward_adjoint_ensemble",
    "terminal_costate",
    "averaged_hamiltonian",
    "maximize_hamiltonian",
]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class CostateEnsemble:
    """Per-atom costate arrays and the cost multiplier of a candidate."""

    costates: np.ndarray          # (n_atoms, n_steps + 1, n)
    lam: float
    ensemble: TrajectoryEnsemble

    def __post_init__(self):
        if self.costates.shape != self.ensemble.states.shape:
            raise ValueError("costate arrays must match the trajectory shapes")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("multiplier must lie in [0, 1]")

    @property
    def sup_norm(self) -> float:
        """Largest costate magnitude over atoms and nodes."""
        if self.costates.size == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.costates, axis=-1)))


def backward_adjoint(sys: ControlSystem, traj: np.ndarray, u: ControlFunction,
                     omega, terminal_p: np.ndarray) -> np.ndarray:
    """RK4 backward integration of ``-p' = (d_x f)^T p`` along ``traj``.

    The trajectory is known at grid nodes only; Jacobians at interval
    midpoints use the node average, which keeps the scheme second order for
    state-dependent Jacobians and exact for state-free ones.
    """
    grid = u.grid
    dt = grid.dt
    nodes = grid.nodes
    p = np.empty((grid.n_steps + 1, sys.state_dim))
    p[-1] = np.atleast_1d(np.asarray(terminal_p, dtype=float))

    for k in range(grid.n_steps - 1, -1, -1):
        uk = u.values[k]
        x_mid = 0.5 * (traj[k] + traj[k + 1])
        a_right = sys.jacobian(nodes[k + 1], traj[k + 1], uk, omega)
        a_mid = sys.jacobian(nodes[k] + 0.5 * dt, x_mid, uk, omega)
        a_left = sys.jacobian(nodes[k], traj[k], uk, omega)

        def rhs(a, q):
            return a.T @ q  # integrating p' = A^T p in reversed time

        q = p[k + 1]
        k1 = rhs(a_right, q)
        k2 = rhs(a_mid, q + 0.5 * dt * k1)
        k3 = rhs(a_mid, q + 0.5 * dt * k2)
        k4 = rhs(a_left, q + dt * k3)
        p[k] = q + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(p[k])):
            raise DynamicsBlowUp(f"adjoint blow-up at t_{k} = {nodes[k]:.6g}")
    return p


def terminal_costate(sys: ControlSystem, x_T: np.ndarray, omega, lam: float) -> np.ndarray:
    """Terminal costate value ``-lam * grad g`` plus, when a terminal
    constraint is present, the penalty contribution ``-(1 - lam) * d * grad d``
    (the normal-cone element selected by the quadratic penalty)."""
    x_T = np.atleast_1d(np.asarray(x_T, dtype=float))
    try:
        grad = sys.terminal_gradient(x_T, omega)
    except ValueError as exc:
        raise ValueError(
            "terminal gradient unavailable; supply subgradient selection") from exc
    p_T = -lam * grad
    cons = sys.constraint_for(omega)
    if cons is not None and cons.kind != "none":
        p_T = p_T - (1.0 - lam) * cons.penalty_gradient(x_T)
    return p_T


def backward_adjoint_ensemble(sys: ControlSystem, ens: TrajectoryEnsemble,
                              lam: float) -> CostateEnsemble:
    """Backward adjoints for every atom, terminal values from the multiplier
    split between cost gradient and constraint penalty."""
    costates = np.empty_like(ens.states)
    for j, omega in enumerate(ens.measure.atoms):
        p_T = terminal_costate(sys, ens.states[j, -1], omega, lam)
        costates[j] = backward_adjoint(sys, ens.states[j], ens.control, omega, p_T)
    return CostateEnsemble(costates, lam, ens)


def averaged_hamiltonian(sys: ControlSystem, ens: TrajectoryEnsemble,
                         cost: CostateEnsemble, k: int, u: np.ndarray) -> float:
    """Weighted sum over atoms of ``p(t_k) . f(t_k, x(t_k), u, omega)``."""
    t = ens.control.grid.nodes[k]
    u = np.atleast_1d(np.asarray(u, dtype=float))
    total = 0.0
    for j, (omega, w) in enumerate(zip(ens.measure.atoms, ens.measure.weights)):
        fval = np.asarray(sys.f(t, ens.states[j, k], u, omega), dtype=float)
        total += w * float(cost.costates[j, k] @ fval)
    return total


def _golden_section_max(fun, lo: float, hi: float, tol: float) -> tuple[float, float]:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while (b - a) > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    mid = 0.5 * (a + b)
    return mid, fun(mid)


def maximize_hamiltonian(sys: ControlSystem, ens: TrajectoryEnsemble,
                         cost: CostateEnsemble, k: int,
                         grid_points: int = 33, tol: float = 1e-8):
    """Maximizer of the averaged Hamiltonian at node ``k`` over the control
    set.

    Finite sets are enumerated exactly (ties to the lowest index).  Boxes are
    scanned on a per-axis grid and refined per axis by golden section to
    ``tol`` in the control; box corners and the grid winner are re-checked so
    affine Hamiltonians resolve to exact vertices.
    """
    cset = sys.control_set

    def H(u):
        return averaged_hamiltonian(sys, ens, cost, k, u)

    if cset.kind == "finite":
        best_i, best_v = 0, H(cset.values[0])
        for i in range(1, len(cset.values)):
            v = H(cset.values[i])
            if v > best_v:
                best_i, best_v = i, v
        return cset.values[best_i].copy(), best_v

    lo, hi = cset.lo, cset.hi
    m = len(lo)

    # coordinate grid: full tensor scan when affordable, axis-wise otherwise
    axes = [np.linspace(lo[i], hi[i], grid_points) if hi[i] > lo[i]
            else np.array([lo[i]]) for i in range(m)]

    if m == 1 and len(axes[0]) >= 5:
        # scalar fast path; affine profiles (control-affine dynamics) resolve
        # exactly to a box corner and skip the refinement entirely
        vals = np.array([H(np.array([a])) for a in axes[0]])
        second = np.abs(np.diff(vals, 2))
        if second.size and second.max() <= 1e-12 * (1.0 + np.abs(vals).max()):
            best = 0 if vals[0] >= vals[-1] else len(vals) - 1
            return np.array([axes[0][best]]), float(vals[best])
        i_best = int(np.argmax(vals))
        best_u = np.array([axes[0][i_best]])
        best_v = float(vals[i_best])
        step = axes[0][1] - axes[0][0]
        a = max(lo[0], best_u[0] - step)
        b = min(hi[0], best_u[0] + step)
        u_r, v_r = _golden_section_max(lambda z: H(np.array([z])), a, b, tol)
        if v_r > best_v:
            best_u, best_v = np.array([u_r]), v_r
        for corner in (lo[0], hi[0]):
            v = H(np.array([corner]))
            if v > best_v:
                best_u, best_v = np.array([corner]), v
        return best_u, best_v

    if int(np.prod([len(a) for a in axes])) <= 40_000:
        best_u, best_v = None, -np.inf
        mesh = np.meshgrid(*axes, indexing="ij")
        candidates = np.stack([g.ravel() for g in mesh], axis=-1)
        for cand in candidates:
            v = H(cand)
            if v > best_v:
                best_u, best_v = cand.copy(), v
    else:
        best_u = 0.5 * (lo + hi)
        best_v = H(best_u)
        for i in range(m):
            u_try = best_u.copy()
            for val in axes[i]:
                u_try[i] = val
                v = H(u_try)
                if v > best_v:
                    best_u, best_v = u_try.copy(), v

    # golden-section refinement per axis around the incumbent, cycled twice
    for _ in range(2):
        for i in range(m):
            if hi[i] <= lo[i]:
                continue
            step = (hi[i] - lo[i]) / (grid_points - 1)
            a = max(lo[i], best_u[i] - step)
            b = min(hi[i], best_u[i] + step)

            def axis_fun(val, i=i):
                u_try = best_u.copy()
                u_try[i] = val
                return H(u_try)

            u_i, v = _golden_section_max(axis_fun, a, b, tol)
            if v > best_v:
                best_u = best_u.copy()
                best_u[i] = u_i
                best_v = v

    # snap check: corners dominate when the Hamiltonian is affine per axis
    if m <= 4:
        mesh = np.meshgrid(*[(lo[i], hi[i]) for i in range(m)], indexing="ij")
        for cand in np.stack([g.ravel() for g in mesh], axis=-1):
            v = H(np.atleast_1d(cand))
            if v > best_v:
                best_u, best_v = np.atleast_1d(cand).astype(float).copy(), v
    return best_u, best_v
