import numpy as np
import pytest

from mfctree.derivatives import gaussian_direction
from mfctree.dynamics import TimeGrid, build_tree, draw_noise, sample_initial_particles
from mfctree.lq_oracle import LQSpec
from mfctree.model import (linear_functional, mean_square_functional, moment_functional, random_smooth_problem,
                           variance_functional)
from mfctree.solver import SolveOptions, solve_mfc
from mfctree.verify import (FAIL, PASS, SKIPPED, check_bellman, check_convexity_gap, check_dpp, check_flow,
                            check_gradient, check_independence, check_ito, check_lipschitz_DV,
                            check_master_residual, check_value_bounds, run_bellman_check)

from conftest import small_setup


@pytest.mark.parametrize("seed,n", [(0, 1), (4, 2)])
def test_gradient_check_passes(seed, n):
    spec = random_smooth_problem(seed, n=n)
    tree, noise, X0 = small_setup(spec, K=4, N=16, seed=seed)
    rep = check_gradient(spec, tree, noise, X0, n_dirs=6, seed=seed)
    assert rep.status == PASS, rep.metadata["errors"]


def test_sabotaged_gradient_fails():
    spec = random_smooth_problem(0)
    tree, noise, X0 = small_setup(spec, K=4, N=16)
    rep = check_gradient(spec, tree, noise, X0, n_dirs=4, sabotage=lambda G: G.scale(1.0 + 1e-4))
    assert rep.status == FAIL


def test_convexity_gap_and_inflated_margin(lq):
    spec = lq.to_problem()
    tree, noise, X0 = small_setup(spec, K=4, N=16)
    assert check_convexity_gap(spec, tree, noise, X0, trials=10).status == PASS
    inflated = spec.with_changes(lam=3.0 * spec.lam)
    assert check_convexity_gap(inflated, tree, noise, X0, trials=10).status == FAIL


@pytest.mark.parametrize("F", [linear_functional(np.ones(1)), moment_functional(1.0), mean_square_functional(1.0)],
                         ids=["linear", "moment", "mean_square"])
def test_ito_formula(lq, F):
    spec = lq.to_problem()
    rep = check_ito(spec, F, u=np.array([0.3]), K=4, N=512, paths=64)
    assert rep.status == PASS, rep.metadata["residuals"]


def test_ito_exact_for_linear_functionals(lq):
    rep = check_ito(lq.to_problem(), linear_functional(np.ones(1)), K=4, N=256, paths=16)
    assert rep.metadata["max_abs_residual"] <= 1e-12


def test_dpp_and_flow(lq_solution):
    k1 = lq_solution.tree.K // 2
    assert check_dpp(lq_solution, k1).status == PASS
    assert check_flow(lq_solution, k1).status == PASS


def test_independence_and_its_violation(lq):
    F = variance_functional(1.0)
    X = sample_initial_particles(400, 1, 0, 0.2, 1.0)
    assert check_independence(F, X, seed=1).status == PASS
    dependent = X - X.mean(axis=0)
    assert check_independence(F, X, Y=dependent).status == FAIL
    assert check_independence(F, X, Y=np.ones_like(X)).status == SKIPPED


def test_value_bounds_and_lipschitz_constants(lq):
    spec = lq.to_problem()
    ladder = ((32, 3), (64, 4), (128, 5))
    assert check_value_bounds(spec, ladder).status == PASS
    assert check_lipschitz_DV(spec, ladder).status == PASS


@pytest.mark.parametrize("sigma,beta", [(0.4, 0.3), (0.0, 0.3), (0.4, 0.0)])
def test_bellman_with_noise(sigma, beta):
    lq = LQSpec(q=0.5, q_T=1.0, kappa=0.5, kappa_bar=0.5, sigma=sigma, beta=beta)
    spec = lq.to_problem()
    tree = build_tree(TimeGrid(0.0, 1.0, 8), 2)
    X0 = sample_initial_particles(64, 1, 0, 0.5)
    rep = run_bellman_check(spec, X0, tree, 1, opts=SolveOptions(grad_tol=1e-11))
    assert rep.status == PASS and rep.observed <= 0.05


def test_bellman_deterministic_and_lean_agree():
    lq = LQSpec(q=0.5, q_T=1.0, kappa=0.5, kappa_bar=0.5, sigma=0.0, beta=0.0)
    spec = lq.to_problem()
    tree = build_tree(TimeGrid(0.0, 1.0, 8), 1)
    X0 = sample_initial_particles(32, 1, 0, 0.5)
    opts = SolveOptions(grad_tol=1e-12, max_iters=500)
    lean = run_bellman_check(spec, X0, tree, 1, opts=opts)
    full = check_bellman(solve_mfc(spec, X0, tree, None, opts))
    assert lean.status == PASS and lean.observed <= 0.01
    assert full.observed == pytest.approx(lean.observed, rel=1e-6, abs=1e-9)


def test_master_residual_small():
    lq = LQSpec(q=0.5, q_T=1.0, kappa=0.5, kappa_bar=0.5, sigma=0.4, beta=0.0)
    spec = lq.to_problem()
    tree = build_tree(TimeGrid(0.0, 1.0, 6), 2)
    X0 = sample_initial_particles(64, 1, 0, 0.5)
    base = solve_mfc(spec, X0, tree, draw_noise(tree, 64, 0), SolveOptions(grad_tol=1e-11))
    rep = check_master_residual(spec, base, [-0.5, 0.0, 0.5])
    assert rep.status == PASS and rep.observed <= 0.10
    assert rep.metadata["terminal_identity_error"] <= 1e-12


def test_master_residual_skips_common_noise(lq_solution, lq):
    assert check_master_residual(lq.to_problem(), lq_solution, [0.0]).status == SKIPPED


def test_report_serializes(lq_solution):
    d = check_flow(lq_solution, 2).to_dict()
    assert list(d) == ["name", "status", "observed", "bound_or_target", "tolerance", "metadata", "reason"]
    assert gaussian_direction(4, 1, 0).shape == (4, 1)
