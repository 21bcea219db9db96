import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfctree.dynamics import TimeGrid, build_tree, draw_noise, sample_initial_particles
from mfctree.lq_oracle import LQSpec
from mfctree.solver import SolveOptions, solve_mfc

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_setup(spec, K=4, N=32, branching=2, seed=0, init_mean=0.3, init_std=0.7):
    tree = build_tree(TimeGrid(0.0, spec.T, K), branching, "binomial", spec.n)
    noise = draw_noise(tree, N, seed) if spec.sigma.any() else None
    X0 = sample_initial_particles(N, spec.n, seed, init_mean, init_std)
    return tree, noise, X0


@pytest.fixture(scope="session")
def lq():
    return LQSpec(q=0.5, q_T=1.0, kappa=0.5, kappa_bar=0.5, sigma=0.4, beta=0.3)


@pytest.fixture(scope="session")
def lq_solution(lq):
    spec = lq.to_problem()
    tree, noise, X0 = small_setup(spec, K=6, N=48)
    return solve_mfc(spec, X0, tree, noise, SolveOptions(grad_tol=1e-11, max_iters=400))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA = []


@pytest.fixture
def criterion():
    def record(number, name, passed, detail):
        line = f"criterion {number:2d} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
        CRITERIA.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
