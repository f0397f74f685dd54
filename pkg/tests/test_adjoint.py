"""Backward adjoint integration and averaged-Hamiltonian maximization."""

import numpy as np
import pytest

from ensemble_oc.adjoint import (
    CostateEnsemble,
    averaged_hamiltonian,
    backward_adjoint,
    backward_adjoint_ensemble,
    maximize_hamiltonian,
    terminal_costate,
)
from ensemble_oc.benchmarks import get_benchmark
from ensemble_oc.measure import ProbabilityMeasure, discretize
from ensemble_oc.system import (
    ConstraintSet,
    ControlFunction,
    ControlSet,
    ControlSystem,
    TimeGrid,
    propagate,
    propagate_ensemble,
)

OMEGA = np.array([0.0])


def scalar_system(f, jac=None, g=None, grad_g=None, lo=-1.0, hi=1.0, x0=0.0,
                  constraint=None):
    return ControlSystem(
        state_dim=1, control_dim=1, horizon=1.0, x0=np.array([x0]),
        f=f, jac_x=jac, g=g or (lambda x, omega: 0.0), grad_g=grad_g,
        control_set=ControlSet("box", lo=[lo], hi=[hi]), constraint=constraint)


# ---------------------------------------------------------------------------
# backward adjoint
# ---------------------------------------------------------------------------

def test_state_free_jacobian_gives_constant_costate():
    sys_ = scalar_system(lambda t, x, u, omega: np.asarray(u),
                         jac=lambda t, x, u, omega: np.zeros((1, 1)))
    grid = TimeGrid(60, 1.0)
    u = ControlFunction.constant(grid, [1.0])
    traj = propagate(sys_, u, OMEGA)
    p = backward_adjoint(sys_, traj, u, OMEGA, np.array([1.0]))
    np.testing.assert_allclose(p, 1.0)


@pytest.mark.parametrize("a", [0.5, 1.0, -0.8])
def test_linear_adjoint_against_analytic(a):
    sys_ = scalar_system(lambda t, x, u, omega: a * x,
                         jac=lambda t, x, u, omega: np.array([[a]]), x0=1.0)
    grid = TimeGrid(100, 1.0)
    u = ControlFunction.constant(grid, [0.0])
    traj = propagate(sys_, u, OMEGA)
    p = backward_adjoint(sys_, traj, u, OMEGA, np.array([1.0]))
    # exact solution p(t) = exp(a (1 - t))
    np.testing.assert_allclose(p[:, 0], np.exp(a * (1.0 - grid.nodes)), atol=1e-8)
    assert abs(p[0, 0] - np.exp(a)) <= 1e-8


def test_zero_terminal_costate_stays_zero():
    sys_ = scalar_system(lambda t, x, u, omega: np.sin(x),
                         jac=lambda t, x, u, omega: np.array([[np.cos(float(x[0]))]]))
    grid = TimeGrid(50, 1.0)
    u = ControlFunction.constant(grid, [0.0])
    traj = propagate(sys_, u, OMEGA)
    p = backward_adjoint(sys_, traj, u, OMEGA, np.array([0.0]))
    np.testing.assert_allclose(p, 0.0)


def test_adjoint_linearity_in_terminal_value():
    sys_ = scalar_system(lambda t, x, u, omega: np.tanh(x) + np.asarray(u),
                         jac=lambda t, x, u, omega: np.array(
                             [[1.0 - np.tanh(float(x[0])) ** 2]]), x0=0.3)
    grid = TimeGrid(80, 1.0)
    u = ControlFunction.constant(grid, [0.2])
    traj = propagate(sys_, u, OMEGA)
    p1 = backward_adjoint(sys_, traj, u, OMEGA, np.array([1.0]))
    p2 = backward_adjoint(sys_, traj, u, OMEGA, np.array([-0.7]))
    combo = backward_adjoint(sys_, traj, u, OMEGA, np.array([2.0 * 1.0 + 0.5 * -0.7]))
    np.testing.assert_allclose(combo, 2.0 * p1 + 0.5 * p2, atol=1e-10)


def test_finite_difference_jacobian_matches_analytic():
    analytic = lambda t, x, u, omega: np.array([[np.cos(float(x[0])), 1.0],
                                                [0.0, 2.0 * float(x[1])]])

    def f(t, x, u, omega):
        return np.array([np.sin(float(x[0])) + float(x[1]), float(x[1]) ** 2])

    sys_fd = ControlSystem(2, 1, 1.0, np.zeros(2), f=f,
                           g=lambda x, omega: 0.0,
                           control_set=ControlSet("box", lo=[0.0], hi=[0.0]))
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.uniform(-2, 2, 2)
        J_fd = sys_fd.jacobian(0.0, x, np.zeros(1), OMEGA)
        J_an = analytic(0.0, x, np.zeros(1), OMEGA)
        denom = max(1.0, float(np.max(np.abs(J_an))))
        assert np.max(np.abs(J_fd - J_an)) / denom <= 1e-4


# ---------------------------------------------------------------------------
# terminal costate
# ---------------------------------------------------------------------------

def test_terminal_costate_away_from_kink():
    sys_, _, _ = get_benchmark("paper-example").build()
    p_T = terminal_costate(sys_, np.array([1.0]), np.array([0.5]), 1.0)
    np.testing.assert_allclose(p_T, [1.0])


def test_terminal_costate_constant_cost_is_zero():
    sys_ = scalar_system(lambda t, x, u, omega: np.asarray(u),
                         g=lambda x, omega: 3.0,
                         grad_g=lambda x, omega: np.zeros(1))
    np.testing.assert_allclose(terminal_costate(sys_, np.array([0.2]), OMEGA, 1.0), 0.0)


def test_terminal_costate_quadratic_gradient():
    sys_ = ControlSystem(2, 1, 1.0, np.zeros(2),
                         f=lambda t, x, u, omega: np.zeros(2),
                         g=lambda x, omega: 0.5 * float(x @ x),
                         grad_g=lambda x, omega: np.asarray(x, dtype=float),
                         control_set=ControlSet("box", lo=[0.0], hi=[0.0]))
    p_T = terminal_costate(sys_, np.array([2.0, 0.0]), OMEGA, 1.0)
    np.testing.assert_allclose(p_T, [-2.0, 0.0])


def test_terminal_costate_kink_raises():
    sys_, _, _ = get_benchmark("paper-example").build()
    with pytest.raises(ValueError, match="subgradient selection"):
        terminal_costate(sys_, np.array([0.5]), np.array([0.5]), 1.0)


def test_terminal_costate_penalty_split():
    cons = ConstraintSet("point", target=[0.0])
    sys_ = scalar_system(lambda t, x, u, omega: np.asarray(u),
                         g=lambda x, omega: float(x[0]),
                         grad_g=lambda x, omega: np.ones(1), constraint=cons)
    lam = 0.25
    p_T = terminal_costate(sys_, np.array([2.0]), OMEGA, lam)
    # -lam * grad g - (1 - lam) * d * grad d = -0.25 - 0.75 * 2.0
    np.testing.assert_allclose(p_T, [-0.25 - 0.75 * 2.0])


# ---------------------------------------------------------------------------
# averaged Hamiltonian
# ---------------------------------------------------------------------------

def _paper_setup(level=2, n_steps=20, u_val=1.0):
    sys_, mu, _ = get_benchmark("paper-example").build()
    mu_l = discretize(mu, level)
    grid = TimeGrid(n_steps, 1.0)
    u = ControlFunction.constant(grid, [u_val])
    ens = propagate_ensemble(sys_, u, mu_l)
    costates = backward_adjoint_ensemble(sys_, ens, 1.0)
    return sys_, ens, costates


def test_hamiltonian_zero_costates():
    sys_, ens, costates = _paper_setup()
    zero = CostateEnsemble(np.zeros_like(costates.costates), 1.0, ens)
    for u in (-1.0, 0.0, 0.7):
        assert averaged_hamiltonian(sys_, ens, zero, 5, np.array([u])) == 0.0


def test_hamiltonian_paper_structure_returns_control():
    # integrator dynamics with p = 1 for every atom: H(u) = u
    sys_, ens, costates = _paper_setup()
    np.testing.assert_allclose(costates.costates, 1.0)
    for u in (-0.4, 0.0, 1.0):
        assert averaged_hamiltonian(sys_, ens, costates, 3,
                                    np.array([u])) == pytest.approx(u, abs=1e-14)


def test_hamiltonian_single_atom_is_plain_product():
    sys_ = scalar_system(lambda t, x, u, omega: 2.0 * np.asarray(u),
                         jac=lambda t, x, u, omega: np.zeros((1, 1)))
    mu_l = discretize(ProbabilityMeasure.from_atoms([[0.3]], [1.0]), 1)
    grid = TimeGrid(10, 1.0)
    u = ControlFunction.constant(grid, [0.5])
    ens = propagate_ensemble(sys_, u, mu_l)
    p = np.full_like(ens.states, -1.5)
    cens = CostateEnsemble(p, 1.0, ens)
    assert averaged_hamiltonian(sys_, ens, cens, 4,
                                np.array([0.8])) == pytest.approx(-1.5 * 1.6)


# ---------------------------------------------------------------------------
# maximization
# ---------------------------------------------------------------------------

def test_maximize_paper_example_returns_plus_one():
    sys_, ens, costates = _paper_setup()
    u_star, value = maximize_hamiltonian(sys_, ens, costates, 0)
    np.testing.assert_allclose(u_star, [1.0])
    assert value == pytest.approx(1.0, abs=1e-12)


def test_maximize_affine_negative_slope_hits_lower_corner():
    sys_, ens, costates = _paper_setup()
    flipped = CostateEnsemble(-costates.costates, 1.0, ens)
    u_star, value = maximize_hamiltonian(sys_, ens, flipped, 0)
    np.testing.assert_allclose(u_star, [-1.0])
    assert value == pytest.approx(1.0, abs=1e-12)


def test_maximize_finite_set_enumeration():
    values = np.array([[0.0], [1.0], [2.0]])
    sys_ = ControlSystem(
        1, 1, 1.0, np.zeros(1),
        f=lambda t, x, u, omega: -((np.asarray(u) - 1.2) ** 2),
        jac_x=lambda t, x, u, omega: np.zeros((1, 1)),
        g=lambda x, omega: 0.0,
        control_set=ControlSet("finite", values=values))
    mu_l = discretize(ProbabilityMeasure.from_atoms([[0.0]], [1.0]), 1)
    grid = TimeGrid(4, 1.0)
    u = ControlFunction(grid, np.zeros((4, 1)))
    ens = propagate_ensemble(sys_, u, mu_l)
    cens = CostateEnsemble(np.ones_like(ens.states), 1.0, ens)
    u_star, value = maximize_hamiltonian(sys_, ens, cens, 0)
    np.testing.assert_allclose(u_star, [1.0])
    assert value == pytest.approx(-0.04, abs=1e-14)


def test_maximize_finite_ties_take_lowest_index():
    values = np.array([[-1.0], [1.0]])
    sys_ = ControlSystem(
        1, 1, 1.0, np.zeros(1),
        f=lambda t, x, u, omega: np.asarray(u) ** 2,
        jac_x=lambda t, x, u, omega: np.zeros((1, 1)),
        g=lambda x, omega: 0.0,
        control_set=ControlSet("finite", values=values))
    mu_l = discretize(ProbabilityMeasure.from_atoms([[0.0]], [1.0]), 1)
    u = ControlFunction(TimeGrid(2, 1.0), np.zeros((2, 1)))
    ens = propagate_ensemble(sys_, u, mu_l)
    cens = CostateEnsemble(np.ones_like(ens.states), 1.0, ens)
    u_star, _ = maximize_hamiltonian(sys_, ens, cens, 0)
    np.testing.assert_allclose(u_star, [-1.0])


def test_maximize_interior_quadratic_peak():
    # H(u) = -(u - 0.3)^2 on [-1, 1]: golden refinement must land on 0.3
    sys_ = scalar_system(lambda t, x, u, omega: -((np.asarray(u) - 0.3) ** 2),
                         jac=lambda t, x, u, omega: np.zeros((1, 1)))
    mu_l = discretize(ProbabilityMeasure.from_atoms([[0.0]], [1.0]), 1)
    u = ControlFunction(TimeGrid(2, 1.0), np.zeros((2, 1)))
    ens = propagate_ensemble(sys_, u, mu_l)
    cens = CostateEnsemble(np.ones_like(ens.states), 1.0, ens)
    u_star, value = maximize_hamiltonian(sys_, ens, cens, 0)
    assert abs(u_star[0] - 0.3) <= 1e-7
    assert value == pytest.approx(0.0, abs=1e-13)


def test_maximize_two_dimensional_box():
    def f(t, x, u, omega):
        return np.array([-((u[0] - 0.25) ** 2) - ((u[1] + 0.5) ** 2)])

    sys_ = ControlSystem(1, 2, 1.0, np.zeros(1), f=f,
                         jac_x=lambda t, x, u, omega: np.zeros((1, 1)),
                         g=lambda x, omega: 0.0,
                         control_set=ControlSet("box", lo=[-1, -1], hi=[1, 1]))
    mu_l = discretize(ProbabilityMeasure.from_atoms([[0.0]], [1.0]), 1)
    u = ControlFunction(TimeGrid(2, 1.0), np.zeros((2, 2)))
    ens = propagate_ensemble(sys_, u, mu_l)
    cens = CostateEnsemble(np.ones_like(ens.states), 1.0, ens)
    u_star, _ = maximize_hamiltonian(sys_, ens, cens, 0)
    np.testing.assert_allclose(u_star, [0.25, -0.5], atol=1e-6)


def test_argmax_invariant_under_positive_scaling():
    sys_, ens, costates = _paper_setup(level=3)
    for s in (0.02, 1.0, 40.0):
        scaled = CostateEnsemble(s * costates.costates, min(1.0, s), ens)
        u_star, _ = maximize_hamiltonian(sys_, ens, scaled, 2)
        np.testing.assert_allclose(u_star, [1.0])


def test_costate_ensemble_shape_validation():
    sys_, ens, costates = _paper_setup()
    with pytest.raises(ValueError):
        CostateEnsemble(costates.costates[:, :-1], 1.0, ens)
    with pytest.raises(ValueError):
        CostateEnsemble(costates.costates, 1.5, ens)
