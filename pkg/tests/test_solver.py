import numpy as np
import pytest
from sklearn.base import clone

from mfctree.dynamics import TimeGrid, build_tree, draw_noise, sample_initial_particles
from mfctree.lq_oracle import LQSpec, discrete_gains, lqr_tree_solve
from mfctree.model import make_problem, random_smooth_problem
from mfctree.solver import MFCSolver, SolvabilityError, SolveOptions, solve_feedback, solve_mfc

from conftest import small_setup


@pytest.mark.parametrize("rule", ["cg", "fixed", "backtracking", "strong-convexity"])
def test_step_rules_reach_the_oracle(lq, rule):
    spec = lq.to_problem()
    tree, noise, X0 = small_setup(spec, K=4, N=16)
    oracle = lqr_tree_solve(lq, tree, noise, X0)
    sol = solve_mfc(spec, X0, tree, noise, SolveOptions(step_rule=rule, grad_tol=1e-10, max_iters=3000))
    assert sol.converged
    assert sol.control.max_abs_diff(oracle.control) <= 1e-8
    assert sol.value == pytest.approx(oracle.value, rel=1e-10)


def test_history_is_monotone_for_smooth_problem():
    spec = random_smooth_problem(3, n=1)
    tree, noise, X0 = small_setup(spec, K=5, N=16)
    sol = solve_mfc(spec, X0, tree, noise, SolveOptions(grad_tol=1e-9))
    costs = sol.history
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(costs, costs[1:]))
    assert sol.grad_norm <= 1e-9


def test_non_positive_margin_is_refused():
    spec = make_problem("double-well-running-cost", w=3.0)
    tree, noise, X0 = small_setup(spec, K=3, N=8)
    with pytest.raises(SolvabilityError):
        solve_mfc(spec, X0, tree, noise)


def test_solution_is_deterministic_and_worker_invariant(lq):
    spec = lq.to_problem()
    tree, _, X0 = small_setup(spec, K=4, N=20)
    a = solve_mfc(spec, X0, tree, draw_noise(tree, 20, 1), SolveOptions(workers=1))
    b = solve_mfc(spec, X0, tree, draw_noise(tree, 20, 1, workers=4), SolveOptions(workers=4))
    assert a.value == b.value
    assert a.control.max_abs_diff(b.control) == 0.0


def test_feedback_backend_recovers_riccati_gains():
    lq = LQSpec(q=0.5, q_T=1.0, kappa=0.4, kappa_bar=0.3, sigma=0.3, beta=0.2)
    spec = lq.to_problem()
    K = 4
    tree = build_tree(TimeGrid(0.0, 1.0, K), 2)
    X0 = sample_initial_particles(64, 1, 2, 0.3)
    sol = solve_feedback(spec, X0, tree, draw_noise(tree, 64, 2), opts=SolveOptions(grad_tol=1e-10, max_iters=400))
    p, Q = discrete_gains(lq, K, tree.dt)
    oracle = lqr_tree_solve(lq, tree, draw_noise(tree, 64, 2), X0)
    assert sol.value == pytest.approx(oracle.value, rel=1e-6)
    assert sol.policy is not None


class TestEstimator:
    def test_params_roundtrip_and_clone(self, lq):
        est = MFCSolver(problem=lq.to_problem(), K=3, branching=2, seed=4)
        params = est.get_params()
        assert params["K"] == 3 and params["seed"] == 4
        twin = clone(est)
        assert twin.get_params()["K"] == 3 and twin is not est

    def test_fit_predict_score(self, lq):
        spec = lq.to_problem()
        X = sample_initial_particles(16, 1, 0, 0.2)
        est = MFCSolver(problem=spec, K=3, grad_tol=1e-11).fit(X)
        tree = build_tree(TimeGrid(0.0, 1.0, 3), 2)
        oracle = lqr_tree_solve(lq, tree, draw_noise(tree, 16, 0), X)
        np.testing.assert_allclose(est.predict(X), oracle.control.levels[0][0], atol=1e-9)
        assert est.score(X) == pytest.approx(-oracle.value, rel=1e-10)
        shifted = X + 1.0
        assert est.score(shifted) < est.score(X)

    def test_dimension_mismatch(self, lq):
        est = MFCSolver(problem=lq.to_problem(), K=2)
        with pytest.raises(ValueError):
            est.fit(np.zeros((4, 2)))
