"""Numerical certificates for candidate solutions.

A candidate (multiplier, control, trajectory ensemble, costate ensemble) is
checked against the stationarity conditions of the finite-support problem:
nontriviality of (lam, costates), the adjoint equation, the terminal
transversality relation against the capped normal cone, pointwise
maximality of the averaged Hamiltonian, and the state equation itself.
Each check returns quantitative residuals; ``verify_all`` aggregates them
into a report with pass flags against configured tolerances.

Maximality residuals are normalized by (lam + sup|p|): the conditions are
positively homogeneous in (lam, p), so pass/fail flags must not depend on a
joint rescaling of the certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ensemble_oc.adjoint import (
    CostateEnsemble,
    averaged_hamiltonian,
    maximize_hamiltonian,
)
from ensemble_oc.measure import FiniteSupportMeasure
from ensemble_oc.system import ControlFunction, ControlSystem, TrajectoryEnsemble

__all__ = [
    "Certificate",
    "Tolerances",
    "ResidualReport",
    "check_nontriviality",
    "check_adjoint",
    "check_transversality",
    "check_maximality",
    "check_dynamics",
    "verify_all",
]


@dataclass
class Certificate:
    """Candidate for the necessary conditions: multiplier, control, one
    trajectory and one costate arc per atom of the measure."""

    lam: float
    control: ControlFunction
    ensemble: TrajectoryEnsemble
    costates: CostateEnsemble
    measure: FiniteSupportMeasure

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("multiplier must lie in [0, 1]")
        if self.ensemble.states.shape != self.costates.costates.shape:
            raise ValueError("trajectory and costate shapes must agree")
        if self.ensemble.states.shape[0] != len(self.measure):
            raise ValueError("one trajectory per atom required")
        if self.ensemble.states.shape[1] != self.control.grid.n_steps + 1:
            raise ValueError("arrays must match the control grid")

    @classmethod
    def from_result(cls, result) -> "Certificate":
        if result.ensemble is None or result.costates is None:
            raise ValueError("solve result carries no ensemble to certify")
        return cls(result.costates.lam, result.control, result.ensemble,
                   result.costates, result.ensemble.measure)

    @property
    def scale(self) -> float:
        """Homogeneity scale lam + sup|p| used to normalize residuals."""
        return self.lam + self.costates.sup_norm


@dataclass
class Tolerances:
    """Pass thresholds.  Scheme residuals (adjoint, dynamics) pass below
    ``c * dt^2 + tol``; the remaining checks compare against ``tol``
    directly.  ``exceptional_fraction`` allows that share of time nodes to
    fail maximality (default: none)."""

    nontriviality_floor: float = 1e-8
    adjoint_c: float = 10.0
    adjoint_tol: float = 1e-6
    transversality_tol: float = 1e-6
    maximality_tol: float = 1e-6
    dynamics_c: float = 10.0
    dynamics_tol: float = 1e-6
    exceptional_fraction: float = 0.0
    active_tol: float = 1e-4
    hamiltonian_grid: int = 33
    hamiltonian_tol: float = 1e-8

    @classmethod
    def at(cls, tol: float) -> "Tolerances":
        """Uniform tolerance for all residual checks."""
        return cls(adjoint_tol=tol, transversality_tol=tol,
                   maximality_tol=tol, dynamics_tol=tol)


@dataclass
class ResidualReport:
    """Per-condition residuals with pass flags against the tolerances."""

    nontriviality: float
    nontriviality_min: float
    adjoint: np.ndarray
    transversality: np.ndarray
    maximality: np.ndarray
    dynamics: np.ndarray
    dt: float
    mode: str
    tolerances: Tolerances
    passes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.passes.values())

    def to_dict(self) -> dict:
        tol = self.tolerances
        return {
            "mode": self.mode,
            "passed": bool(self.passed),
            "passes": {k: bool(v) for k, v in sorted(self.passes.items())},
            "residuals": {
                "nontriviality": self.nontriviality,
                "nontriviality_min": self.nontriviality_min,
                "adjoint": [float(x) for x in self.adjoint],
                "transversality": [float(x) for x in self.transversality],
                "maximality": [float(x) for x in self.maximality],
                "dynamics": [float(x) for x in self.dynamics],
            },
            "dt": self.dt,
            "tolerances": {
                "nontriviality_floor": tol.nontriviality_floor,
                "adjoint_c": tol.adjoint_c,
                "adjoint_tol": tol.adjoint_tol,
                "transversality_tol": tol.transversality_tol,
                "maximality_tol": tol.maximality_tol,
                "dynamics_c": tol.dynamics_c,
                "dynamics_tol": tol.dynamics_tol,
                "exceptional_fraction": tol.exceptional_fraction,
                "active_tol": tol.active_tol,
            },
        }


def check_nontriviality(cert: Certificate, mode: str = "aggregate") -> float:
    """Joint size of the multiplier and the costate family.

    "aggregate": lam + the largest costate sup-norm over atoms (the family
    must not vanish as a whole).  "per-atom": the minimum over atoms of
    lam + that atom's costate sup-norm (no single atom may degenerate).
    """
    p = cert.costates.costates
    per_atom = np.max(np.linalg.norm(p, axis=-1), axis=-1) if p.size else np.zeros(0)
    if mode == "per-atom":
        return float(cert.lam + per_atom.min()) if len(per_atom) else float(cert.lam)
    return float(cert.lam + (per_atom.max() if len(per_atom) else 0.0))


def check_adjoint(cert: Certificate, sys: ControlSystem) -> np.ndarray:
    """Per atom, the largest midpoint-scheme residual of the adjoint
    equation -p' = (d_x f)^T p along the stored arcs."""
    grid = cert.control.grid
    dt = grid.dt
    nodes = grid.nodes
    out = np.empty(len(cert.measure))
    for j, omega in enumerate(cert.measure.atoms):
        x = cert.ensemble.states[j]
        p = cert.costates.costates[j]
        worst = 0.0
        for k in range(grid.n_steps):
            x_mid = 0.5 * (x[k] + x[k + 1])
            p_mid = 0.5 * (p[k] + p[k + 1])
            a_mid = sys.jacobian(nodes[k] + 0.5 * dt, x_mid, cert.control.values[k], omega)
            r = (p[k + 1] - p[k]) / dt + a_mid.T @ p_mid
            worst = max(worst, float(np.linalg.norm(r)))
        out[j] = worst
    return out


def check_transversality(cert: Certificate, sys: ControlSystem,
                         active_tol: float = 1e-4) -> np.ndarray:
    """Per atom, the distance from -p(T) - lam * grad g(x(T)) to the normal
    cone of the terminal constraint capped at the unit ball (free endpoint:
    the cone is the origin, so the residual is the full vector norm)."""
    out = np.empty(len(cert.measure))
    for j, omega in enumerate(cert.measure.atoms):
        x_T = cert.ensemble.states[j, -1]
        grad = sys.terminal_gradient(x_T, omega)
        v = -cert.costates.costates[j, -1] - cert.lam * grad
        cons = sys.constraint_for(omega)
        if cons is None:
            out[j] = float(np.linalg.norm(v))
        else:
            out[j] = cons.normal_cone_distance(v, x_T, active_tol)
    return out


def check_maximality(cert: Certificate, sys: ControlSystem,
                     grid_points: int = 33, search_tol: float = 1e-8,
                     clamp_tol: float = 1e-6) -> np.ndarray:
    """Per time node, the normalized gap between the maximized averaged
    Hamiltonian and its value at the candidate control.  Tiny negative gaps
    (the grid search landing below the candidate) are clamped to zero within
    ``clamp_tol``."""
    n_steps = cert.control.grid.n_steps
    ens = cert.ensemble
    cost = cert.costates
    scale = cert.scale
    out = np.empty(n_steps)
    if scale <= 0.0:
        out.fill(0.0)  # degenerate certificate: nontriviality flags it
        return out
    for k in range(n_steps):
        h_cur = averaged_hamiltonian(sys, ens, cost, k, cert.control.values[k])
        _, v = maximize_hamiltonian(sys, ens, cost, k, grid_points, search_tol)
        r = (v - h_cur) / scale
        if r < 0.0 and r >= -clamp_tol:
            r = 0.0
        out[k] = r
    return out


def check_dynamics(cert: Certificate, sys: ControlSystem) -> np.ndarray:
    """Per atom, the largest midpoint-scheme residual of the state equation,
    including the initial-state gap."""
    grid = cert.control.grid
    dt = grid.dt
    nodes = grid.nodes
    out = np.empty(len(cert.measure))
    for j, omega in enumerate(cert.measure.atoms):
        x = cert.ensemble.states[j]
        worst = float(np.linalg.norm(x[0] - sys.x0))
        for k in range(grid.n_steps):
            x_mid = 0.5 * (x[k] + x[k + 1])
            fv = np.asarray(sys.f(nodes[k] + 0.5 * dt, x_mid,
                                  cert.control.values[k], omega), dtype=float)
            r = (x[k + 1] - x[k]) / dt - fv
            worst = max(worst, float(np.linalg.norm(r)))
        out[j] = worst
    return out


def verify_all(cert: Certificate, sys: ControlSystem,
               tolerances: Tolerances | None = None,
               mode: str = "smooth") -> ResidualReport:
    """Run every check and aggregate pass flags.

    ``mode="atomic"`` treats the measure's atoms as the full support: the
    certificate must cover every atom and the nontriviality flag uses the
    per-atom minimum.  ``mode="smooth"`` flags nontriviality on the family
    as a whole.
    """
    if mode not in ("smooth", "atomic"):
        raise ValueError(f"unknown verification mode {mode!r}")
    tol = tolerances or Tolerances()
    dt = cert.control.grid.dt

    nontriv = check_nontriviality(cert, "aggregate")
    nontriv_min = check_nontriviality(cert, "per-atom")
    adjoint = check_adjoint(cert, sys)
    trans = check_transversality(cert, sys, tol.active_tol)
    maxim = check_maximality(cert, sys, tol.hamiltonian_grid,
                             tol.hamiltonian_tol, tol.maximality_tol)
    dyn = check_dynamics(cert, sys)

    if mode == "atomic" and len(cert.measure) != cert.costates.costates.shape[0]:
        raise ValueError("atomic mode requires a costate arc for every atom")

    scheme_adj = tol.adjoint_c * dt * dt + tol.adjoint_tol
    scheme_dyn = tol.dynamics_c * dt * dt + tol.dynamics_tol
    n_steps = len(maxim)
    allowed_fail = int(np.floor(tol.exceptional_fraction * n_steps))
    n_fail = int(np.count_nonzero(maxim > tol.maximality_tol))

    passes = {
        "nontriviality": (nontriv_min if mode == "atomic" else nontriv) >= tol.nontriviality_floor,
        "adjoint": bool(np.all(adjoint <= scheme_adj)),
        "transversality": bool(np.all(trans <= tol.transversality_tol)),
        "maximality": n_fail <= allowed_fail,
        "dynamics": bool(np.all(dyn <= scheme_dyn)),
    }
    return ResidualReport(
        nontriviality=nontriv,
        nontriviality_min=nontriv_min,
        adjoint=adjoint,
        transversality=trans,
        maximality=maxim,
        dynamics=dyn,
        dt=dt,
        mode=mode,
        tolerances=tol,
        passes=passes,
    )
