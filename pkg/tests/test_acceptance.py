"""Acceptance gate: one test per exit criterion, each printing a verdict line.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines; the full suite must be green for the artifact to count as done.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_tiny_instance
from ensemble_oc.adjoint import backward_adjoint
from ensemble_oc.benchmarks import get_benchmark
from ensemble_oc.cli import run
from ensemble_oc.measure import (
    ProbabilityMeasure,
    discretize,
    weak_star_bound,
    weak_star_gap,
)
from ensemble_oc.solver import SolveConfig, brute_force_oracle, solve
from ensemble_oc.system import (
    ControlFunction,
    ControlSet,
    ControlSystem,
    TimeGrid,
    propagate,
    sensitivity_check,
)
from ensemble_oc.verify import Certificate, Tolerances, check_transversality, verify_all


def _verdict(n, name, ok):
    print(f"ACCEPTANCE {n} ({name}): {'PASS' if ok else 'FAIL'}")
    assert ok, f"criterion {n} ({name}) failed"


# ---------------------------------------------------------------------------
# 1. reference-problem reproduction
# ---------------------------------------------------------------------------

def test_criterion_1_reference_reproduction(tmp_path):
    # independent value oracle first: averaging -|y - w| over uniform w in
    # [-1, 1] by quadrature must match -(1 + y^2)/2, minimized at y = +-1
    ws = np.linspace(-1.0, 1.0, 200_001)
    best = np.inf
    for y in np.linspace(-1.0, 1.0, 41):
        quad = float(np.trapezoid(-np.abs(y - ws), ws)) / 2.0
        assert quad == pytest.approx(-(1.0 + y * y) / 2.0, abs=1e-8)
        best = min(best, quad)
    assert best == pytest.approx(-1.0, abs=1e-8)

    out = tmp_path / "paper"
    start = time.monotonic()
    code = run(["benchmark", "--name", "paper-example", "--level", "6",
                "--grid", "200", "--out", str(out)])
    elapsed = time.monotonic() - start

    summary = json.loads((out / "summary.json").read_text())
    control = np.array([[float(v) for v in line.split(",")[1:]]
                        for line in (out / "control.csv").read_text()
                        .strip().splitlines()[1:]])
    costates = np.array([float(line.split(",")[-1])
                         for line in (out / "costates.csv").read_text()
                         .strip().splitlines()[1:]])
    dt = 1.0 / summary["grid"]
    branch_dev = min(float(np.sum(np.abs(control - 1.0)) * dt),
                     float(np.sum(np.abs(control + 1.0)) * dt))
    branch_sign = 1.0 if np.mean(control) > 0 else -1.0

    ok = (code == 0
          and elapsed < 10.0
          and summary["status"] == "converged"
          and abs(summary["cost"] - (-1.0)) <= 5e-3
          and branch_dev <= 1e-3
          and float(np.max(np.abs(costates - branch_sign))) <= 1e-6)
    _verdict(1, "reference reproduction", ok)


# ---------------------------------------------------------------------------
# 2. certificate closure of converged solves
# ---------------------------------------------------------------------------

def test_criterion_2_certificate_closure(solved_benchmark):
    names = ("paper-example", "omega-free-lq", "scaled-drift", "point-target")
    checked = 0
    ok = True
    for name in names:
        sys_, mu, _, res = solved_benchmark(name)
        if res.status != "converged":
            continue
        checked += 1
        mode = "atomic" if mu.kind == "atoms" else "smooth"
        report = verify_all(Certificate.from_result(res), sys_,
                            Tolerances.at(1e-5), mode=mode)
        ok = ok and report.passed
    ok = ok and checked >= 3
    _verdict(2, "certificate closure", ok)


# ---------------------------------------------------------------------------
# 3. oracle equivalence on randomized tiny instances
# ---------------------------------------------------------------------------

def test_criterion_3_oracle_equivalence():
    rng = np.random.default_rng(7130)
    start = time.monotonic()
    worst = 0.0
    for _ in range(20):
        sys_, mu_l, cset, n_steps = make_tiny_instance(rng)
        _, oracle_cost = brute_force_oracle(sys_, mu_l, TimeGrid(n_steps, 1.0), cset)
        res = solve(sys_, mu_l, SolveConfig(n_steps=n_steps, level=1, max_sweeps=200))
        worst = max(worst, abs(res.cost - oracle_cost))
    elapsed = time.monotonic() - start
    _verdict(3, "oracle equivalence", worst <= 1e-4 and elapsed < 60.0)


# ---------------------------------------------------------------------------
# 4. trajectory sensitivity bound
# ---------------------------------------------------------------------------

def test_criterion_4_sensitivity_bound():
    sys_, mu, _ = get_benchmark("scaled-drift").build()
    mu_l = discretize(mu, 1)
    grid = TimeGrid(50, sys_.horizon)
    rng = np.random.default_rng(424242)
    violations = 0
    for _ in range(100):
        u1 = ControlFunction(grid, rng.uniform(-1, 1, (grid.n_steps, 1)))
        v = u1.values.copy()
        mask = rng.random(grid.n_steps) < rng.uniform(0.05, 1.0)
        v[mask] = rng.uniform(-1, 1, (int(mask.sum()), 1))
        rep = sensitivity_check(sys_, mu_l, u1, ControlFunction(grid, v))
        violations += len(rep.violations)
    _verdict(4, "sensitivity bound", violations == 0)


# ---------------------------------------------------------------------------
# 5. weak-star convergence of the discretization
# ---------------------------------------------------------------------------

def test_criterion_5_weak_star_convergence():
    rng = np.random.default_rng(20240811)
    mu = ProbabilityMeasure.uniform([[-1.0, 1.0]])
    levels = [2, 4, 8, 16, 32]
    measures = {l: discretize(mu, l) for l in levels}
    ok = True
    for _ in range(10):
        kinks = rng.uniform(0.2, 1.0, 4), rng.uniform(-0.9, 0.9, 4)
        slopes, points = kinks
        lin = rng.uniform(-0.5, 0.5)
        off = rng.uniform(-1.0, 1.0)

        def h(w, slopes=slopes, points=points, lin=lin, off=off):
            return off + lin * w[0] + float(np.sum(slopes * np.abs(w[0] - points)))

        lip = abs(lin) + float(slopes.sum())
        breaks = np.concatenate([[-1.0, 1.0], points])
        sup = max(abs(h(np.array([x]))) for x in breaks)
        gaps = []
        for level in levels:
            (gap,) = weak_star_gap(mu, measures[level], [(h, lip, sup)])
            gaps.append(gap)
            ok = ok and gap <= lip / level + 2.0 * sup / level
            ok = ok and gap <= weak_star_bound(level, lip, sup)
        for i in range(len(levels) - 1):
            ok = ok and gaps[i + 1] <= gaps[i] + 1e-8
    _verdict(5, "weak-star convergence", ok)


# ---------------------------------------------------------------------------
# 6. constrained atomic transversality
# ---------------------------------------------------------------------------

def test_criterion_6_point_target_transversality(solved_benchmark):
    sys_, _, _, res = solved_benchmark("point-target")
    cert = Certificate.from_result(res)
    trans = check_transversality(cert, sys_)
    ok = (res.constraint_residual <= 1e-5
          and float(np.max(trans)) <= 1e-5)
    _verdict(6, "constrained transversality", ok)


# ---------------------------------------------------------------------------
# 7. numerical hygiene
# ---------------------------------------------------------------------------

def test_criterion_7_numerical_hygiene():
    decay = ControlSystem(1, 1, 1.0, np.array([1.0]),
                          f=lambda t, x, u, omega: -x,
                          jac_x=lambda t, x, u, omega: np.array([[-1.0]]),
                          g=lambda x, omega: 0.0,
                          control_set=ControlSet("box", lo=[0.0], hi=[0.0]))
    errors = []
    for n in (25, 50, 100):
        u = ControlFunction.constant(TimeGrid(n, 1.0), [0.0])
        x = propagate(decay, u, np.zeros(1))
        errors.append(abs(float(x[-1, 0]) - np.exp(-1.0)))
    order_ok = errors[0] / errors[1] >= 8.0 and errors[1] / errors[2] >= 8.0

    # adjoint linearity on a smooth nonlinear system
    bent = ControlSystem(1, 1, 1.0, np.array([0.3]),
                         f=lambda t, x, u, omega: np.tanh(x) + np.asarray(u),
                         jac_x=lambda t, x, u, omega: np.array(
                             [[1.0 - np.tanh(float(x[0])) ** 2]]),
                         g=lambda x, omega: 0.0,
                         control_set=ControlSet("box", lo=[-1.0], hi=[1.0]))
    grid = TimeGrid(80, 1.0)
    u = ControlFunction.constant(grid, [0.2])
    traj = propagate(bent, u, np.zeros(1))
    p1 = backward_adjoint(bent, traj, u, np.zeros(1), np.array([1.0]))
    p2 = backward_adjoint(bent, traj, u, np.zeros(1), np.array([-0.7]))
    combo = backward_adjoint(bent, traj, u, np.zeros(1),
                             np.array([2.0 * 1.0 + 0.5 * (-0.7)]))
    linear_ok = float(np.max(np.abs(combo - (2.0 * p1 + 0.5 * p2)))) <= 1e-10

    # analytic vs finite-difference Jacobians on the bent system
    fd = ControlSystem(1, 1, 1.0, np.array([0.3]),
                       f=bent.f, g=bent.g, control_set=bent.control_set)
    rng = np.random.default_rng(7)
    jac_ok = True
    for _ in range(25):
        x = rng.uniform(-2.0, 2.0, 1)
        J_an = bent.jacobian(0.0, x, np.zeros(1), np.zeros(1))
        J_fd = fd.jacobian(0.0, x, np.zeros(1), np.zeros(1))
        denom = max(1.0, float(np.abs(J_an).max()))
        jac_ok = jac_ok and float(np.abs(J_an - J_fd).max()) / denom <= 1e-4

    _verdict(7, "numerical hygiene", order_ok and linear_ok and jac_ok)
