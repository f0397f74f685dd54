import numpy as np
import pytest

from ensemble_oc.benchmarks import get_benchmark
from ensemble_oc.measure import ProbabilityMeasure, discretize
from ensemble_oc.solver import solve
from ensemble_oc.system import ControlSet, ControlSystem, RegularityData


@pytest.fixture(scope="session")
def solved_benchmark():
    """Solve each registered benchmark at most once per test session."""
    cache = {}

    def get(name):
        if name not in cache:
            sys_, mu, cfg = get_benchmark(name).build()
            cache[name] = (sys_, mu, cfg, solve(sys_, mu, cfg))
        return cache[name]

    return get


def make_tiny_instance(rng):
    """Tiny ensemble instance whose discrete optimum the sweep provably
    reaches: state-free dynamics make the cost convex in the control sum,
    where single-interval moves are complete.  Half the draws use linear
    terminal costs (bang-bang optima), half convex quadratic ones."""
    n_steps = int(rng.integers(2, 7))
    n_atoms = int(rng.integers(1, 5))
    n_vals = int(rng.integers(2, 4))
    b = rng.uniform(0.3, 1.0)
    gamma = rng.uniform(-0.4, 0.4)
    delta = rng.uniform(-0.6, 0.6)
    quadratic = rng.random() < 0.5
    omegas = np.stack([rng.uniform(-1, 1, n_atoms),
                       rng.uniform(-1, 1, n_atoms)], axis=1)
    weights = rng.uniform(0.2, 1.0, n_atoms)
    weights = weights / weights.sum()
    betas = rng.uniform(-1.0, 1.0, n_atoms)

    def f(t, x, u, omega, b=b, gamma=gamma, delta=delta):
        return ((b + gamma * float(omega[0])) * np.asarray(u)
                + delta * float(omega[1]) * np.cos(np.pi * t))

    def jac(t, x, u, omega):
        return np.zeros((1, 1))

    if quadratic:
        def g(x, omega):
            return 0.5 * (float(x[0]) - float(omega[1])) ** 2

        def grad_g(x, omega):
            return np.array([float(x[0]) - float(omega[1])])
    else:
        slope = {tuple(om): float(beta) for om, beta in zip(omegas, betas)}

        def g(x, omega, slope=slope):
            return slope[tuple(np.atleast_1d(omega))] * float(x[0])

        def grad_g(x, omega, slope=slope):
            return np.array([slope[tuple(np.atleast_1d(omega))]])

    mu_l = discretize(ProbabilityMeasure.from_atoms(omegas, weights), 1)
    cset = ControlSet("finite", values=np.linspace(-1, 1, n_vals)[:, None])
    sys_ = ControlSystem(1, 1, 1.0, np.zeros(1), f=f, jac_x=jac, g=g,
                         grad_g=grad_g, control_set=cset,
                         regularity=RegularityData(c=2.0, k_f=0.0, k_g=2.0))
    return sys_, mu_l, cset, n_steps
