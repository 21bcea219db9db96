"""Numerical checks of the optimality system, derivative identities and structural inequalities.

Every check returns a :class:`CheckReport`. A report FAILs exactly when its
observed quantity violates the bound beyond the stated tolerance; reports
carry the grid sizes, seeds and tolerance split needed to replay them.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _engine, _rng
from ._engine import MeanFieldObjective, TaggedObjective, _aligned_ranges
from .derivatives import (SkippedError, constant_direction, gaussian_direction, perturbed_base, second_directional,
                          tagged_solve)
from .dynamics import (ControlField, TimeGrid, build_tree, draw_noise, edge_increments,
                       sample_initial_particles)
from .hamiltonian import argmin_lagrangian
from .model import check_convexity_margin
from .solver import SolveOptions, solve_mfc

log = logging.getLogger(__name__)

PASS, FAIL, SKIPPED = "PASS", "FAIL", "SKIPPED"
DEFAULT_LADDER = ((64, 4), (128, 6), (256, 8), (512, 10))


@dataclass
class CheckReport:
    name: str
    status: str
    observed: float
    bound_or_target: float
    tolerance: float
    metadata: dict = field(default_factory=dict)
    reason: str = None

    @property
    def passed(self):
        return self.status != FAIL

    def to_dict(self):
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _upper(name, observed, bound, tolerance, metadata):
    """PASS iff observed <= bound + tolerance."""
    status = PASS if observed <= bound + tolerance else FAIL
    return CheckReport(name, status, float(observed), float(bound), float(tolerance), metadata)


def _lower(name, observed, bound, tolerance, metadata):
    """PASS iff observed >= bound - tolerance."""
    status = PASS if observed >= bound - tolerance else FAIL
    return CheckReport(name, status, float(observed), float(bound), float(tolerance), metadata)


def _skipped(name, reason, metadata=None):
    return CheckReport(name, SKIPPED, float("nan"), float("nan"), 0.0, metadata or {}, reason)


def _setup(spec, N, K, branching=2, seed=0, t0=0.0, mode="binomial", init_mean=0.0, init_std=1.0, init=None):
    tree = build_tree(TimeGrid(t0, spec.T, K), branching, mode, spec.n)
    noise = draw_noise(tree, N, seed)
    X0 = sample_initial_particles(N, spec.n, seed, init_mean, init_std) if init is None else np.asarray(init, float)
    return tree, noise, X0


def _roots(X0):
    X0 = np.asarray(X0, dtype=float)
    return X0[None] if X0.ndim == 2 else X0


# ---------------------------------------------------------------------------
# gradient and convexity

def check_gradient(spec, tree, noise, init, n_dirs=20, seed=0, eps=1e-5, rtol=1e-6, control=None, sabotage=None):
    """Adjoint gradient against central differences of the discrete cost along random directions.

    ``sabotage`` maps the gradient field to a modified one (negative control).
    """
    obj = MeanFieldObjective(spec)
    X0 = _roots(init)
    N, n = X0.shape[1], X0.shape[2]
    U = ControlField.random(tree, N, n, seed + 1, 0.5) if control is None else control
    G = ControlField(tree, _engine.evaluate(obj, tree, noise, X0, U.levels, grad=True).grad)
    if sabotage is not None:
        G = sabotage(G)
    errors = []
    for m in range(n_dirs):
        D = ControlField.random(tree, N, n, seed + 100 + m)
        jp = _engine.evaluate(obj, tree, noise, X0, U.levels, D=D.levels, alpha=eps).cost
        jm = _engine.evaluate(obj, tree, noise, X0, U.levels, D=D.levels, alpha=-eps).cost
        fd = (jp - jm) / (2 * eps)
        an = G.inner(D)
        errors.append(abs(fd - an) / max(abs(an), abs(fd), 1e-300))
    meta = {"K": tree.K, "N": N, "n": n, "children": tree.n_children, "eps": eps, "n_dirs": n_dirs, "seed": seed,
            "errors": errors}
    return _upper("gradient_exactness", max(errors), rtol, 0.0, meta)


def check_convexity_gap(spec, tree, noise, init, trials=50, seed=0, slack=0.05, scale=1.0):
    """Gradient monotonicity <G(u1) - G(u2), u1 - u2> / |u1 - u2|^2 against the declared margin."""
    obj = MeanFieldObjective(spec)
    X0 = _roots(init)
    N, n = X0.shape[1], X0.shape[2]
    margin = check_convexity_margin(spec)
    ratios = []
    for t in range(trials):
        u1 = ControlField.random(tree, N, n, seed + 2 * t, scale)
        u2 = ControlField.random(tree, N, n, seed + 2 * t + 1, scale)
        g1 = ControlField(tree, _engine.evaluate(obj, tree, noise, X0, u1.levels, grad=True).grad)
        g2 = ControlField(tree, _engine.evaluate(obj, tree, noise, X0, u2.levels, grad=True).grad)
        du = u1.combine(-1.0, u2)
        ratios.append(g1.axpy(-1.0, g2).inner(du) / du.inner(du))
    meta = {"trials": trials, "seed": seed, "margin": margin, "K": tree.K, "N": N, "min": min(ratios),
            "max": max(ratios)}
    return _lower("convexity_gap", min(ratios), (1.0 - slack) * margin, 0.0, meta)


# ---------------------------------------------------------------------------
# Ito formula on sampled common-noise paths

def _ito_rhs(F, X, u, sigma, beta):
    """Drift of E F(m) predicted by the chain rule at the cloud X (nodes, N, n)."""
    S, N, n = X.shape
    drift = np.zeros(S)
    if u is not None:
        drift = np.einsum("sid,sid->s", F.grad_dnu(X, X), u) / N
    H = F.hess_dnu(X, X)  # (S, N, n, n)
    ss = sigma @ sigma.T
    second = 0.5 * np.einsum("side,ed->s", H, ss) / N
    # the finite-particle diagonal of the kernel term (vanishes as N grows)
    try:
        Kd = F.cross_kernel(X, X, X)
        second = second + 0.5 * np.einsum("side,ed->s", Kd, ss) / N**2
    except Exception:  # kernel not available: drop the O(1/N) correction
        pass
    common = np.zeros(S)
    if beta:
        for j in range(n):
            e = np.zeros((S, N, n))
            e[..., j] = 1.0
            common += 0.5 * beta**2 * np.einsum("sid,sid->s", F.hess_action(X, e), e) / N
    return drift + second + common


def check_ito(spec, F, u=None, K=16, N=4096, branching=2, seed=0, paths=256, path_seed=0, init=None, z=3.0):
    """Chain rule for t -> E F(m_t) along independent sampled replicates.

    Replicate ``r`` follows one randomly sampled common-noise path with its
    own idiosyncratic noise (seed ``seed + r``). At each step the exact
    child average of F(m) below the current node is differenced in time and
    compared with the predicted drift plus the Euler correction
    ``dt/2 <D^2F u, u>`` of the explicit scheme (exact for quadratic F).
    The per-step residual mean must lie within ``z`` standard errors over
    replicates.

    Parameters:
        F: MeasureFunctional with grad_dnu, hess_dnu and hess_action.
        u: None (zero), a constant vector, or a callable (k, X) -> controls.
    """
    tree = build_tree(TimeGrid(0.0, spec.T, K), branching, "binomial", spec.n)
    dt, C, n = tree.dt, tree.n_children, spec.n
    X = sample_initial_particles(N, n, seed) if init is None else np.asarray(init, dtype=float)
    X = np.broadcast_to(X, (paths, N, n)).copy()
    nodes = np.zeros(paths, dtype=np.int64)
    rng = np.random.default_rng([path_seed, 3])
    sig = spec.sigma
    residuals, ses, slacks = [], [], []

    def control(k, X):
        if u is None:
            return None
        if callable(u):
            return np.asarray(u(k, X), dtype=float)
        return np.broadcast_to(np.asarray(u, dtype=float), X.shape)

    for k in range(K):
        uk = control(k, X)
        Y = X if uk is None else X + dt * uk
        incr = np.stack([edge_increments(tree, N, seed + r, k + 1, j, j + 1)[0] for r, j in enumerate(nodes)])
        Xc = Y[:, None] + incr @ sig.T + spec.beta * tree.increments[None, :, None, :]
        Fc = F.value(Xc.reshape(paths * C, N, n)).reshape(paths, C)
        lhs = (Fc @ tree.probs - F.value(X)) / dt
        euler = 0.0
        if uk is not None:
            euler = 0.5 * dt * np.einsum("sid,sid->s", F.hess_action(X, uk), uk) / N
        diff = lhs - _ito_rhs(F, X, uk, sig, spec.beta) - euler
        residuals.append(float(diff.mean()))
        ses.append(float(diff.std(ddof=1) / np.sqrt(paths)) if paths > 1 else 0.0)
        slacks.append(float(np.mean(np.abs(euler))))
        pick = rng.choice(C, size=paths, p=tree.probs)
        X = Xc[np.arange(paths), pick]
        nodes = nodes * C + pick
    res, se = np.abs(residuals), np.array(ses)
    bound = z * se + 1e-12
    meta = {"K": K, "N": N, "paths": paths, "seed": seed, "path_seed": path_seed, "residuals": residuals,
            "standard_errors": ses, "euler_correction": slacks, "z": z, "max_abs_residual": float(res.max())}
    return _upper("ito", float(np.max(res / bound)), 1.0, 0.0, meta)


# ---------------------------------------------------------------------------
# dynamic programming and flow property

def running_cost(spec, solution, k1):
    """Running cost of the first ``k1`` steps along the solution."""
    tree = solution.tree
    obj = MeanFieldObjective(spec)
    dt, C = tree.dt, tree.n_children
    total = 0.0
    for k in range(k1):
        P = tree.level_probs(k)
        Xl, Ul = solution.ensemble.levels[k], solution.control.levels[k]
        N, n = Xl.shape[1], Xl.shape[2]
        for j0, j1 in _aligned_ranges(tree.n_nodes(k), C * N * n):
            c = obj.stage_cost(k, j0, j1, np.asarray(Xl[j0:j1]), np.asarray(Ul[j0:j1]))
            total += dt * float(P[j0:j1] @ c.mean(axis=1))
    return total


def _tail(solution, k1, opts=None):
    cache = solution.__dict__.setdefault("_tail_cache", {})
    if k1 in cache:
        return cache[k1]
    spec, tree = solution.spec, solution.tree
    init = np.asarray(solution.ensemble.levels[k1])
    if k1 == tree.K:
        obj = MeanFieldObjective(spec)
        c = obj.terminal_cost(0, tree.n_nodes(k1), init).mean(axis=1)
        out = (float(tree.level_probs(k1) @ c), None)
    else:
        sub = solve_mfc(spec, init, tree.subtree(k1), solution.noise.subtree(k1) if solution.noise else None,
                        opts or solution.options)
        out = (sub.value, sub)
    cache[k1] = out
    return out


def check_dpp(solution, k1, tol=1e-4, opts=None):
    """V(root) = running cost up to k1 + average optimal value of the subproblems at level k1."""
    sub_value, sub = _tail(solution, k1, opts)
    partial = running_cost(solution.spec, solution, k1)
    residual = abs(solution.value - partial - sub_value)
    gtol = solution.options.grad_tol if solution.options else 0.0
    meta = {"k1": k1, "K": solution.tree.K, "value": solution.value, "partial": partial, "sub_value": sub_value,
            "certificate_tolerance": 10 * gtol}
    return _upper("dpp", residual, 0.0, tol, meta)


def check_flow(solution, k1, tol=1e-6, opts=None):
    """Optimal controls of the subproblems at level k1 agree with the tail of the full optimum."""
    sub_value, sub = _tail(solution, k1, opts)
    if sub is None:
        return _upper("flow", 0.0, 0.0, tol, {"k1": k1, "K": solution.tree.K, "note": "no remaining controls"})
    diff = sub.control.max_abs_diff(solution.control.subtree(k1))
    gtol = solution.options.grad_tol if solution.options else 0.0
    meta = {"k1": k1, "K": solution.tree.K, "certificate_tolerance": 10 * gtol}
    return _upper("flow", diff, 0.0, tol, meta)


# ---------------------------------------------------------------------------
# Bellman and master equations

def _shift_solve(spec, X0, tree, noise, shift, opts):
    """Forest of all subtrees below level ``shift``, every root started from the cloud ``X0``."""
    if not 1 <= shift < tree.K:
        raise ValueError("shift must lie in 1..K-1")
    X0 = np.asarray(X0)
    if X0.ndim == 3:
        if X0.shape[0] != 1:
            raise ValueError("start-time shifts need a single-root solution")
        X0 = X0[0]
    init = np.broadcast_to(X0, (tree.n_nodes(shift),) + X0.shape).copy()
    sub_noise = noise.subtree(shift) if noise is not None else None
    return solve_mfc(spec, init, tree.subtree(shift), sub_noise, opts)


def shifted_solution(spec, solution, shift):
    """Re-solve from the same cloud with the start time moved forward by ``shift`` steps.

    The shifted problem is the forest of all subtrees below level ``shift``,
    each root started from the initial cloud and weighted by its branch
    probability. Its value is then an average over the same noise the base
    tree uses, so start-time differences are not swamped by the sampling
    error of a single subtree.
    """
    return _shift_solve(spec, solution.init, solution.tree, solution.noise, shift, solution.options)


def _root_average(solution, a):
    """Branch-probability average of a per-root array (roots first)."""
    a = np.asarray(a)
    if solution.tree.n_roots == 1:
        return a
    return np.tensordot(solution.tree.root_probs, a, axes=(0, 0))


def _displacement(increments, sigma, shift):
    """sigma * (sum of Wiener increments) from the root to every level-``shift`` node.

    ``increments(k)`` returns the (parents, C, P, n) increments into level k.
    """
    disp = None
    for k in range(1, shift + 1):
        inc = increments(k) @ sigma.T
        disp = inc if disp is None else disp[:, None] + inc
        disp = disp.reshape((-1,) + inc.shape[2:])
    return disp


def _shifted_value(spec, shifted, noise, shift):
    """Value of a shifted forest plus the idiosyncratic control variate.

    The forest roots see subtree noise that the base tree reaches only after
    ``shift`` increments. Each root costate depends on its own future noise, so
    pairing it with that root's idiosyncratic displacement gives a term with
    zero mean that carries most of the sampling error of the difference
    V(t0) - V(t0 + shift dt); adding it back leaves the expectation unchanged.
    The displacement includes the common increments of the skipped steps.
    """
    Z = np.asarray(shifted.Z0)
    tree = shifted.tree
    C = tree.n_children
    common = _displacement(lambda k: np.broadcast_to(tree.increments[None, :, None, :], (C ** (k - 1), C, 1, tree.n)),
                           spec.beta * np.eye(tree.n), shift)  # (roots, 1, n)
    xi = common if noise is None else _displacement(noise.increments, spec.sigma, shift) + common
    cv = float(shifted.tree.root_probs @ np.einsum("rid,rid->r", Z, xi)) / Z.shape[1]
    return shifted.value + cv, cv


def _midpoint_costate(spec, X, Z, U):
    """Average of the initial adjoint Z and its conditional one-step-ahead mean.

    At a stationary control the latter equals ``-l_v(X, U)``. The average is
    the costate the explicit scheme is consistent with to second order in dt;
    the plain initial adjoint leaves an O(dt) bias in the Hamiltonian term.
    """
    return 0.5 * (Z - spec.l_v(X, U))


def _edge_images(spec, solution, stored, probs, common, common_imgs):
    """Displacements on the edges of one level and their images under D^2 V(X0).

    ``stored`` holds the stored idiosyncratic increments (parents, C_stored,
    N, n); only those are solved for, the implied last child of a centered
    draw follows by linearity. The common displacement ``common[c]`` (n,) of
    edge c enters through the precomputed images ``common_imgs[j]`` of the
    constant unit directions. Returns two (parents, C, N, n) arrays.
    """
    vec = np.asarray(stored) @ spec.sigma.T
    imgs = np.empty_like(vec)
    for a in range(vec.shape[0]):
        for c in range(vec.shape[1]):
            imgs[a, c] = second_directional(spec, solution, vec[a, c]).result
    C = probs.shape[0]
    if vec.shape[1] < C:
        vec = np.concatenate([vec, -np.einsum("c,pcid->pid", probs[:-1], vec)[:, None] / probs[-1]], axis=1)
        imgs = np.concatenate([imgs, -np.einsum("c,pcid->pid", probs[:-1], imgs)[:, None] / probs[-1]], axis=1)
    vec = vec + common[None, :, None, :]
    imgs = imgs + np.einsum("cj,jid->cid", common, common_imgs)[None]
    return vec, imgs


def _pathwise_second_order(spec, solution, stored1, stored2, common_imgs):
    """Second-order Bellman terms from the realized displacements of the first two tree steps.

    With Q_s the probability-weighted 1/2 <D^2V xi, xi> over the displacements
    xi (idiosyncratic plus common) to the level-s nodes, (4 Q_1 - Q_2) / (2 dt)
    matches the start-time stencil of V, so the realized quadratic variation
    and the idiosyncratic-common cross terms of those increments cancel
    between the two. Its expectation is 1/2 tr(sigma sigma^T D^2V) plus the
    common-noise term.
    """
    tree = solution.tree
    p, dt = tree.probs, tree.dt
    N, n = np.asarray(solution.init).shape[1:]
    common = spec.beta * tree.increments  # (C, n)
    if stored1 is None:
        # without idiosyncratic noise every child displacement is the common one
        xi1 = np.broadcast_to(common[:, None, :], (tree.n_children, N, n))
        a1 = np.einsum("cj,jid->cid", common, common_imgs)
        xi2 = xi1[:, None] + xi1[None, :]
        a2 = a1[:, None] + a1[None, :]
    else:
        xi1, a1 = _edge_images(spec, solution, stored1, p, common, common_imgs)
        xi1, a1 = xi1[0], a1[0]  # (C, N, n)
        eta, b2 = _edge_images(spec, solution, stored2, p, common, common_imgs)  # (C, C, N, n)
        xi2, a2 = xi1[:, None] + eta, a1[:, None] + b2
    q1 = 0.5 * float(p @ np.einsum("cid,cid->c", a1, xi1)) / N
    q2 = 0.5 * float(np.einsum("a,b,abid,abid->", p, p, a2, xi2)) / N
    return (4.0 * q1 - q2) / (2.0 * dt)


def _bellman_base_terms(spec, solution, n_dirs, dir_seed, idio, stored=None):
    """Hamiltonian, coupling and second-order terms at the initial cloud of ``solution``."""
    X0 = np.asarray(solution.init)[0]
    N, n = X0.shape
    Z0 = np.asarray(solution.Z0)[0]
    p = _midpoint_costate(spec, X0, Z0, np.asarray(solution.control.levels[0])[0])
    terms = {"hamiltonian": float(np.mean(argmin_lagrangian(spec, X0, p).H)), "coupling": float(spec.F.value(X0)),
             "idiosyncratic": 0.0, "common": 0.0}
    common_imgs = np.zeros((n, N, n))
    if spec.beta:
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            d = constant_direction(N, e)
            sd = second_directional(spec, solution, d)
            common_imgs[j] = sd.result
            terms["common"] += 0.5 * spec.beta**2 * sd.pair(d)
    if idio == "pathwise" and (spec.sigma.any() or spec.beta):
        if stored is None and spec.sigma.any():
            stored = (solution.noise.levels[0], solution.noise.levels[1])
        s1, s2 = (None, None) if not spec.sigma.any() else stored
        total = _pathwise_second_order(spec, solution, s1, s2, common_imgs)
        # report the common part at its expectation; the realized remainder is the idiosyncratic term
        terms["idiosyncratic"] = total - terms["common"]
    elif spec.sigma.any():
        vals = []
        for m in range(n_dirs):
            d = gaussian_direction(N, n, dir_seed + m, center=True, whiten=True) @ spec.sigma.T
            vals.append(0.5 * second_directional(spec, solution, d).pair(d))
        terms["idiosyncratic"] = float(np.mean(vals))
    return terms


def _bellman_report(spec, terms, values, cvs, dt, tol, meta):
    deterministic = not spec.sigma.any() and spec.beta == 0
    tol = (0.01 if deterministic else 0.05) if tol is None else tol
    V0, V1, V2 = values
    terms = dict(dV_dt=(-3.0 * V0 + 4.0 * V1 - V2) / (2 * dt), **terms)
    total = sum(terms.values())
    scale = max(abs(v) for v in terms.values())
    rel = abs(total) / scale if scale > 0 else 0.0
    meta.update(terms=terms, absolute_residual=total, control_variates=list(cvs), dt=dt)
    return _upper("bellman", rel, 0.0, tol, meta)


def check_bellman(solution, spec=None, n_dirs=4, dir_seed=0, tol=None, plus=None, plus2=None, idio="pathwise"):
    """Bellman equation at the initial cloud.

    Terms: second-order one-sided start-time difference of V (start times
    t0, t0 + dt, t0 + 2 dt, so no deeper tree is needed), mean Hamiltonian at
    the midpoint costate (see ``_midpoint_costate``), F(m), the
    idiosyncratic second-order term and the common-noise term along constant
    directions. The residual is relative to the largest term.

    Parameters:
        idio: "pathwise" estimates the second-order terms from the realized
            first two tree increments (see ``_pathwise_second_order``);
            "random" averages ``n_dirs`` whitened independent directions.
        plus, plus2: precomputed ``shifted_solution`` results for shifts 1 and 2.
    """
    spec = solution.spec if spec is None else spec
    meta = {"K": solution.tree.K, "N": solution.init.shape[1], "n_dirs": n_dirs, "dir_seed": dir_seed, "idio": idio}
    try:
        terms = _bellman_base_terms(spec, solution, n_dirs, dir_seed, idio)
    except SkippedError as exc:
        return _skipped("bellman", str(exc), meta)
    values, cvs = [solution.value], []
    for shift, pre in ((1, plus), (2, plus2)):
        sol_s = shifted_solution(spec, solution, shift) if pre is None else pre
        v, cv = _shifted_value(spec, sol_s, solution.noise, shift)
        values.append(v)
        cvs.append(cv)
        del sol_s
    return _bellman_report(spec, terms, values, cvs, solution.tree.dt, tol, meta)


def run_bellman_check(spec, init, tree, seed, center=None, opts=None, n_dirs=4, dir_seed=0, tol=None,
                      idio="pathwise"):
    """Solve and run the Bellman check while holding at most one large solution at a time.

    Equivalent to ``check_bellman(solve_mfc(...))`` but frees the base
    solution before the shifted forests are solved, which matters on trees
    whose fields approach the memory budget.
    """
    opts = SolveOptions() if opts is None else opts
    noise = draw_noise(tree, np.asarray(init).shape[-2], seed, center) if spec.sigma.any() else None
    sol = solve_mfc(spec, init, tree, noise, opts)
    stored = None if noise is None else (np.array(noise.levels[0]), np.array(noise.levels[1]))
    sol.noise = noise = None
    X0 = sol.init.copy()
    meta = {"K": tree.K, "N": X0.shape[1], "n_dirs": n_dirs, "dir_seed": dir_seed, "idio": idio, "seed": seed}
    try:
        terms = _bellman_base_terms(spec, sol, n_dirs, dir_seed, idio, stored)
    except SkippedError as exc:
        return _skipped("bellman", str(exc), meta)
    values, cvs = [sol.value], []
    del sol
    for shift in (1, 2):
        noise = draw_noise(tree, X0.shape[1], seed, center) if spec.sigma.any() else None
        sol_s = _shift_solve(spec, X0, tree, noise, shift, opts)
        v, cv = _shifted_value(spec, sol_s, noise, shift)
        values.append(v)
        cvs.append(cv)
        del sol_s, noise
    return _bellman_report(spec, terms, values, cvs, tree.dt, tol, meta)


def terminal_identity(spec, X, x):
    """Largest deviation of the tagged terminal cost from h + dF_T/dnu (both normalized over m)."""
    X = np.asarray(X, dtype=float)[None]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    obj = TaggedObjective(spec, [X])
    tags = np.concatenate([x, X[0]], axis=0)[None]
    raw = obj.terminal_cost(0, 1, tags)[0]
    U = raw[: x.shape[0]] - raw[x.shape[0]:].mean()
    expect = spec.h(x) + spec.F_T.dnu(X[0], x) - float(np.mean(spec.h(X[0])))
    return float(np.max(np.abs(U - expect)))


def _tag_costates(spec, tag, points):
    """Midpoint costates of the first ``len(points)`` tags, per root: (R, P, n)."""
    P, n = points.shape
    R = np.asarray(tag.control.levels[0]).shape[0]
    DU = np.concatenate([tag.DU.reshape(R, -1, n), tag.support_DU.reshape(R, -1, n)], axis=1)
    u = np.asarray(tag.control.levels[0])[:, :P]
    return _midpoint_costate(spec, points[None], DU[:, :P], u)


def _shifted_tag_value(spec, base, shifted, shift, xs, seed):
    """Root-averaged normalized U of a shifted forest with the tag-noise control variate added."""
    tag = tagged_solve(spec, shifted, xs, seed)
    R = shifted.tree.n_roots
    Ux = tag.U.reshape(R, -1)
    DUx = tag.DU.reshape(R, xs.shape[0], -1)
    DUs = tag.support_DU.reshape(R, -1, xs.shape[1])
    tree = base.tree
    center = base.noise.center if base.noise is not None else None
    xi = _displacement(lambda k: edge_increments(tree, 1, seed, k, 0, tree.n_nodes(k - 1), center, _rng.CHANNEL_TAG),
                       spec.sigma, shift)  # (R, 1, n)
    rel = DUx - DUs.mean(axis=1, keepdims=True)
    cv = np.einsum("rmd,rd->rm", rel, xi[:, 0])
    return _root_average(shifted, Ux + cv)


def check_master_residual(spec, base, x_samples, h=1e-2, copies=None, tol=0.10, tagged_seed=None):
    """Master equation for the normalized functional derivative U(x, m, t0) at the points ``x_samples``.

    Time derivatives use second-order one-sided start-time differences over
    forests of subtrees (as in the Bellman check), with a first-order control
    variate for the tag noise. x-derivatives of DU use central differences of
    width ``h`` and measure derivatives are finite differences with injected
    particles. DU enters through the midpoint costate. Since U is normalized
    to zero mean, the equation holds up to the additive constant
    ``mean H(X_i, DU(X_i)) + 1/2 mean tr(sigma sigma^T D^2U(X_i))``, which is
    subtracted.
    """
    if spec.beta != 0:
        return _skipped("master_residual", "common noise not supported by the direct check")
    xs = np.asarray(x_samples, dtype=float).reshape(-1, spec.n)
    M, n = xs.shape
    X0 = np.asarray(base.init)[0]
    N = X0.shape[0]
    copies = max(1, N // 256) if copies is None else copies
    seed = (base.noise.seed if base.noise is not None else 0) if tagged_seed is None else tagged_seed
    ss = spec.sigma @ spec.sigma.T
    eye = np.eye(n)

    def stencil(points):
        """Points and their +-h shifts in every coordinate: (P*(1+2n), n)."""
        out = [points]
        for j in range(n):
            out += [points + h * eye[j], points - h * eye[j]]
        return np.concatenate(out, axis=0)

    def derivs(DU, P):
        """DU at the centers and the Hessian from central differences of DU."""
        center = DU[:P]
        hess = np.empty((P, n, n))
        for j in range(n):
            up = DU[P * (1 + 2 * j):P * (2 + 2 * j)]
            dn = DU[P * (2 + 2 * j):P * (3 + 2 * j)]
            hess[:, :, j] = (up - dn) / (2 * h)
        return center, 0.5 * (hess + np.swapaxes(hess, 1, 2))

    pts = np.concatenate([stencil(xs), stencil(X0)], axis=0)
    off = M * (1 + 2 * n)
    tag = tagged_solve(spec, base, pts, seed)
    U_x = tag.U[:M]
    DU = _tag_costates(spec, tag, pts)[0]
    DU_x, D2U_x = derivs(DU[:off], M)
    DU_s, D2U_s = derivs(DU[off:], N)
    dt = base.tree.dt
    U1 = _shifted_tag_value(spec, base, shifted_solution(spec, base, 1), 1, xs, seed)
    U2 = _shifted_tag_value(spec, base, shifted_solution(spec, base, 2), 2, xs, seed)
    dU = (-3.0 * U_x + 4.0 * U1 - U2) / (2 * dt)
    Hx = argmin_lagrangian(spec, xs, DU_x).H
    Hs = argmin_lagrangian(spec, X0, DU_s)
    const = float(np.mean(Hs.H) + 0.5 * np.mean(np.einsum("ide,ed->i", D2U_s, ss)))
    Fp = spec.F.dnu(X0, xs)
    diffusion = 0.5 * np.einsum("ide,ed->i", D2U_x, ss)
    transport = np.empty(M)
    curvature = np.empty(M)
    eps_used = None
    sup = stencil(X0)
    for i in range(M):
        pb, eps_used = perturbed_base(spec, base, xs[i], copies)
        tq = tagged_solve(spec, pb, sup, seed)
        DUe, D2Ue = derivs(_tag_costates(spec, tq, sup)[0], N)
        transport[i] = float(np.mean(np.sum((DUe - DU_s) / eps_used * Hs.u_star, axis=-1)))
        curvature[i] = 0.5 * float(np.mean(np.einsum("ide,ed->i", (D2Ue - D2U_s) / eps_used, ss)))
    terms = np.stack([dU, Hx, Fp, transport, diffusion, curvature, np.full(M, -const)])
    residual = terms.sum(axis=0)
    scale = np.max(np.abs(terms), axis=0)
    rel = np.abs(residual) / np.where(scale > 0, scale, 1.0)
    term_t = terminal_identity(spec, X0, xs)
    meta = {"x_samples": xs, "N": N, "K": base.tree.K, "h": h, "eps": eps_used, "copies": copies,
            "terms": {"dU_dt": dU, "hamiltonian": Hx, "coupling": Fp, "transport": transport,
                      "diffusion": diffusion, "measure_curvature": curvature, "constant": const},
            "relative_residuals": rel, "terminal_identity_error": term_t, "U": U_x}
    rep = _upper("master_residual", float(rel.max()), 0.0, tol, meta)
    if term_t > 1e-12:
        rep.status = FAIL
        rep.reason = "terminal identity violated"
    return rep


# ---------------------------------------------------------------------------
# growth and regularity constants

def _stable(values, factor=2.0):
    v = np.abs(np.asarray(values, dtype=float))
    if np.all(v == 0):
        return 1.0
    if np.any(v == 0):
        return float("inf")
    return float(v.max() / v.min())


def _ladder_solve(spec, N, K, seed, init_scale, opts, shift=0, init=None):
    tree, noise, X0 = _setup(spec, N, K, seed=seed, init_std=init_scale, init=init)
    if shift:
        grid = tree.grid
        tree = build_tree(TimeGrid(grid.t0 + shift * grid.dt, grid.T, K - shift), tree.branching, tree.mode, spec.n)
        noise = draw_noise(tree, N, seed)
    return solve_mfc(spec, X0, tree, noise, opts), X0


def check_value_bounds(spec, ladder=DEFAULT_LADDER, seed=0, init_scale=1.0, opts=None, factor=2.0):
    """Empirical constant of |V| <= C (1 + |X|^2) must be stable across a refinement ladder."""
    opts = SolveOptions(grad_tol=1e-9) if opts is None else opts
    consts = []
    for N, K in ladder:
        sol, X0 = _ladder_solve(spec, N, K, seed, init_scale, opts)
        consts.append(abs(sol.value) / (1.0 + float(np.mean(np.sum(X0 * X0, axis=1)))))
    ratio = _stable(consts)
    return _upper("value_bounds", ratio, factor, 0.0, {"ladder": ladder, "constants": consts, "seed": seed})


def check_time_regularity(spec, ladder=DEFAULT_LADDER, seed=0, init_scale=1.0, opts=None, factor=2.0):
    """Constants of |V(t+e) - V(t)| <= C e (1 + |X|^2) across the ladder (e = one step).

    The gradient counterpart |D_XV(t+e) - D_XV(t)| is fitted against
    ``a e |X| + b e^(1/2)`` and reported, not gated.
    """
    opts = SolveOptions(grad_tol=1e-9) if opts is None else opts
    consts, eps_list, dz, xnorm = [], [], [], []
    for N, K in ladder:
        s0, X0 = _ladder_solve(spec, N, K, seed, init_scale, opts)
        s1, _ = _ladder_solve(spec, N, K, seed, init_scale, opts, shift=1)
        eps = s0.tree.dt
        m2 = float(np.mean(np.sum(X0 * X0, axis=1)))
        consts.append(abs(s1.value - s0.value) / (eps * (1.0 + m2)))
        Zd = np.asarray(s1.Z0) - np.asarray(s0.Z0)
        dz.append(float(np.sqrt(np.mean(np.sum(Zd * Zd, axis=-1)))))
        eps_list.append(eps)
        xnorm.append(np.sqrt(m2))
    A = np.stack([np.array(eps_list) * np.array(xnorm), np.sqrt(eps_list)], axis=1)
    fit = np.linalg.lstsq(A, np.array(dz), rcond=None)[0]
    meta = {"ladder": ladder, "constants": consts, "gradient_shift_norms": dz, "gradient_fit_ab": fit, "seed": seed}
    return _upper("time_regularity", _stable(consts), factor, 0.0, meta)


def check_lipschitz_DV(spec, ladder=DEFAULT_LADDER, seed=0, init_scale=1.0, delta=0.1, opts=None, factor=2.0):
    """Constants of |D_XV(X1) - D_XV(X2)| <= C |X1 - X2| across the ladder."""
    opts = SolveOptions(grad_tol=1e-10) if opts is None else opts
    consts = []
    for N, K in ladder:
        s1, X1 = _ladder_solve(spec, N, K, seed, init_scale, opts)
        X2 = X1 + delta * gaussian_direction(N, spec.n, seed + 17, center=False)
        s2, _ = _ladder_solve(spec, N, K, seed, init_scale, opts, init=X2)
        dZ = np.asarray(s1.Z0)[0] - np.asarray(s2.Z0)[0]
        consts.append(float(np.sqrt(np.mean(np.sum(dZ * dZ, axis=1))) / np.sqrt(np.mean(np.sum((X1 - X2) ** 2, axis=1)))))
    return _upper("lipschitz_DV", _stable(consts), factor, 0.0,
                  {"ladder": ladder, "constants": consts, "delta": delta, "seed": seed})


# ---------------------------------------------------------------------------
# independence and monotonicity

def check_independence(F, X, seed=0, Y=None, z=3.0):
    """<D_X F(X), Y> vanishes for Y independent of X with zero mean (within z standard errors).

    With a user-supplied Y whose sample mean is significantly nonzero the
    precondition fails and the check is SKIPPED.
    """
    X = np.asarray(X, dtype=float)
    N, n = X.shape
    if Y is None:
        Y = gaussian_direction(N, n, seed, center=False)
    Y = np.asarray(Y, dtype=float).reshape(N, n)
    ym = Y.mean(axis=0)
    yse = Y.std(axis=0, ddof=1) / np.sqrt(N)
    meta = {"N": N, "seed": seed, "z": z}
    if np.any(np.abs(ym) > z * yse + 1e-15):
        return _skipped("independence", "direction does not have zero mean", meta)
    terms = np.sum(F.grad_dnu(X, X) * Y, axis=-1)
    inner = float(terms.mean())
    se = float(terms.std(ddof=1) / np.sqrt(N))
    meta["inner"] = inner
    return _upper("independence", abs(inner), 0.0, z * se, meta)


def estimate_monotonicity(spec, m_samples, seed=0, probes=16):
    """Empirical lower bounds of the Hessian quadratic forms of the couplings (diagnostic only)."""
    rng = np.random.default_rng([seed, 5])
    out = {}
    for key, Fn, declared in (("F", spec.F, spec.c_prime), ("F_T", spec.F_T, spec.c_T_prime)):
        lows = []
        for X in m_samples:
            X = np.asarray(X, dtype=float)
            for _ in range(probes):
                xi = rng.normal(size=X.shape)
                q = float(np.sum(Fn.hess_action(X, xi) * xi)) / float(np.sum(xi * xi))
                lows.append(q)
        low = float(min(lows)) if lows else 0.0
        out[key] = {"lower_bound": low, "declared": -float(declared), "flagged": bool(low < -declared - 1e-12)}
    return out
