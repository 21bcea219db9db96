"""Time grid, common-noise scenario tree, particle noise and forward simulation.

Layout: level ``k`` of a tree holds ``n_roots * C**k`` nodes, where ``C`` is
the number of children per node. Child ``c`` of node ``j`` is node
``j * C + c`` one level down, so every subtree occupies a contiguous block of
each deeper level. Fields indexed by (level, node, particle) are stored as one
array per level of shape ``(nodes, N, n)``.
"""
import csv
import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import _rng
from ._storage import ALLOCATOR, chunk_ranges
from .measure_core import EmpiricalMeasure

DEFAULT_MAX_NODES = 1 << 22
CHUNK_ELEMS = 1 << 16


class ResourceError(RuntimeError):
    """A requested discretization exceeds the configured size limits."""


class NumericalError(RuntimeError):
    """Non-finite values or a failed numerical iteration."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    K: int

    def __post_init__(self):
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        if not self.T > self.t0:
            raise ValueError("need T > t0")

    @property
    def dt(self):
        return (self.T - self.t0) / self.K

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.K + 1)

    def tail(self, k1):
        """Grid for the remaining steps after step ``k1``."""
        return TimeGrid(self.t0 + k1 * self.dt, self.T, self.K - k1)


def _one_dim_rule(branching, mode):
    B = int(branching)
    if B < 1:
        raise ValueError("branching must be >= 1")
    if B == 1:
        return np.zeros(1), np.ones(1)
    if mode == "binomial":
        k = np.arange(B)
        nodes = (2 * k - (B - 1)) / np.sqrt(B - 1.0)
        from scipy.special import comb

        probs = comb(B - 1, k) / 2.0 ** (B - 1)
        return nodes, probs
    if mode == "gaussian-quadrature":
        nodes, weights = np.polynomial.hermite_e.hermegauss(B)
        return nodes, weights / weights.sum()
    raise ValueError(f"unknown tree mode {mode!r}")


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    """Discretized common-noise filtration.

    ``increments[c]`` is the common increment on the edge to child ``c`` and
    ``probs[c]`` its conditional probability; both are the same at every node.
    """

    grid: TimeGrid
    increments: np.ndarray
    probs: np.ndarray
    branching: int = 1
    mode: str = "binomial"
    n_roots: int = 1
    root_probs: np.ndarray = None
    max_nodes: int = DEFAULT_MAX_NODES
    _level_probs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.root_probs is None:
            object.__setattr__(self, "root_probs", np.full(self.n_roots, 1.0 / self.n_roots))
        if self.total_nodes() > self.max_nodes:
            raise ResourceError(f"tree has {self.total_nodes()} nodes, limit is {self.max_nodes}")

    @property
    def K(self):
        return self.grid.K

    @property
    def dt(self):
        return self.grid.dt

    @property
    def n(self):
        return self.increments.shape[1]

    @property
    def n_children(self):
        return self.probs.shape[0]

    def n_nodes(self, k):
        return self.n_roots * self.n_children**k

    def total_nodes(self):
        return sum(self.n_nodes(k) for k in range(self.K + 1))

    def level_probs(self, k):
        """Unconditional probabilities of the nodes at level ``k``."""
        if k not in self._level_probs:
            p = np.asarray(self.root_probs, dtype=float)
            for _ in range(k):
                p = np.outer(p, self.probs).ravel()
            self._level_probs[k] = p
        return self._level_probs[k]

    def parent(self, k, j):
        if k == 0:
            raise ValueError("root nodes have no parent")
        return k - 1, j // self.n_children

    def children(self, k, j):
        C = self.n_children
        return [(k + 1, j * C + c) for c in range(C)]

    def descendants(self, k, j, k2):
        """Index range of the level-``k2`` descendants of node (k, j)."""
        span = self.n_children ** (k2 - k)
        return j * span, (j + 1) * span

    def subtree(self, k1, j=None):
        """Tree below level ``k1``: rooted at node ``j``, or at all level-k1 nodes."""
        grid = self.grid.tail(k1)
        if j is None:
            return ScenarioTree(grid, self.increments, self.probs, self.branching, self.mode,
                                self.n_nodes(k1), self.level_probs(k1) / self.level_probs(k1).sum(),
                                self.max_nodes)
        return ScenarioTree(grid, self.increments, self.probs, self.branching, self.mode, 1, None, self.max_nodes)

    def to_json(self):
        return json.dumps({
            "t0": self.grid.t0, "T": self.grid.T, "K": self.K, "branching": self.branching,
            "mode": self.mode, "n_roots": self.n_roots, "n_children": self.n_children,
            "increments": self.increments.tolist(), "probs": self.probs.tolist(),
        }, sort_keys=True)


def build_tree(grid, branching, mode="binomial", n=1, max_nodes=DEFAULT_MAX_NODES):
    """Scenario tree with moment-matched common increments.

    For ``n > 1`` the one-dimensional rule is applied per coordinate and the
    children enumerate the tensor product, giving ``branching**n`` children.
    """
    nodes, probs = _one_dim_rule(branching, mode)
    combos = list(itertools.product(range(len(nodes)), repeat=n))
    incr = np.array([[nodes[c] for c in combo] for combo in combos]) * np.sqrt(grid.dt)
    p = np.array([np.prod([probs[c] for c in combo]) for combo in combos])
    count = sum(len(combos) ** k for k in range(grid.K + 1))
    if count > max_nodes:
        raise ResourceError(f"tree would have {count} nodes, limit is {max_nodes}")
    return ScenarioTree(grid, incr, p / p.sum(), int(branching), mode, max_nodes=max_nodes)


@dataclass(eq=False)
class NoiseBundle:
    """Idiosyncratic Wiener increments for every tree edge and particle.

    ``levels[k - 1]`` holds the increments into level ``k``, shape
    ``(parents, C_stored, N, n)`` and already scaled by sqrt(dt). With
    ``center=True`` the increments of sibling edges are centered per particle
    (their probability-weighted mean is zero) and rescaled so the expected
    conditional variance stays dt; only the first ``C - 1`` children are
    stored and the last is implied by the zero-mean constraint.
    """

    tree: ScenarioTree
    N: int
    seed: int
    center: bool
    levels: list
    channel: int = _rng.CHANNEL_IDIO
    policy: str = "philox-node-stream-v1"

    @property
    def n(self):
        return self.tree.n

    def increments(self, k, j0=0, j1=None):
        """Increments into level ``k`` for parents ``j0..j1`` at level ``k - 1``: (parents, C, N, n)."""
        block = self.levels[k - 1]
        j1 = block.shape[0] if j1 is None else j1
        stored = np.asarray(block[j0:j1])
        C = self.tree.n_children
        if stored.shape[1] == C:
            return stored
        p = self.tree.probs
        last = -np.einsum("c,pcid->pid", p[:-1], stored) / p[-1]
        return np.concatenate([stored, last[:, None]], axis=1)

    def subtree(self, k1, j=None):
        """Noise of the subtree below node (k1, j), or of all level-k1 nodes."""
        levels = []
        for k in range(k1 + 1, self.tree.K + 1):
            if j is None:
                levels.append(self.levels[k - 1])
            else:
                a, b = self.tree.descendants(k1, j, k - 1)
                levels.append(self.levels[k - 1][a:b])
        return NoiseBundle(self.tree.subtree(k1, j), self.N, self.seed, self.center, levels, self.channel)

    def nbytes(self):
        return sum(lv.nbytes for lv in self.levels)


def edge_increments(tree, N, seed, k, j0, j1, center=None, channel=_rng.CHANNEL_IDIO):
    """Increments into level ``k`` below parents ``j0..j1``: (parents, C, N, n), scaled by sqrt(dt).

    This is the generator behind :func:`draw_noise` and returns the same
    numbers for any node range, so single paths can be sampled without
    drawing the whole tree.
    """
    C, n = tree.n_children, tree.n
    if center is None:
        center = C > 1
    p = tree.probs
    z = _rng.normal_nodes(seed, channel, tree.K - k, j0, j1, N, C * n)
    z = z.reshape(j1 - j0, N, C, n).transpose(0, 2, 1, 3)
    if center:
        rescale = 1.0 / np.sqrt(1.0 - np.sum(p**2))
        z = (z - np.einsum("c,pcid->pid", p, z)[:, None]) * rescale
    return z * np.sqrt(tree.dt)


def draw_noise(tree, N, seed, center=None, channel=_rng.CHANNEL_IDIO, workers=1):
    """Draw the idiosyncratic increments for ``N`` particles per node.

    Draws are keyed by (seed, channel, steps to go, parent node); the node
    stream is consumed particle by particle so the first ``N`` particles are
    identical for any larger particle count. ``center`` defaults to True
    whenever nodes have more than one child.
    """
    C, n, K = tree.n_children, tree.n, tree.K
    if center is None:
        center = C > 1
    if center and C == 1:
        raise ValueError("centering needs at least two children per node")
    c_store = C - 1 if center else C
    levels = []
    for k in range(1, K + 1):
        parents = tree.n_nodes(k - 1)
        out = ALLOCATOR.empty((parents, c_store, N, n))
        per = max(1, CHUNK_ELEMS // max(1, C * N * n))

        def fill(rng_range, k=k, out=out):
            j0, j1 = rng_range
            out[j0:j1] = edge_increments(tree, N, seed, k, j0, j1, center, channel)[:, :c_store]

        _run_chunks(fill, chunk_ranges(parents, per), workers)
        levels.append(out)
    return NoiseBundle(tree, int(N), int(seed), bool(center), levels, channel)


def _run_chunks(fn, ranges, workers):
    if workers is None or workers <= 1 or len(ranges) <= 1:
        return [fn(r) for r in ranges]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, ranges))


def sample_initial_particles(N, n, seed, mean=0.0, std=1.0):
    """Initial cloud drawn from its own random stream, independent of tree noise."""
    z = _rng.normal_block(seed, _rng.CHANNEL_INIT, 0, 0, N, n)
    return np.asarray(mean, dtype=float) + np.asarray(std, dtype=float) * z


@dataclass(eq=False)
class ParticleEnsemble:
    """Particle states per tree level: ``levels[k]`` has shape (nodes at k, N, n)."""

    tree: ScenarioTree
    levels: list

    @property
    def N(self):
        return self.levels[0].shape[1]

    @property
    def n(self):
        return self.levels[0].shape[2]

    def state(self, k):
        return self.levels[k]

    def conditional_mean(self, k, j):
        return np.asarray(self.levels[k][j]).mean(axis=0)

    def conditional_measure(self, k, j):
        return EmpiricalMeasure(np.array(self.levels[k][j]))

    def full_mean(self, k):
        """Tree-probability average of the conditional means at level ``k``."""
        means = np.asarray(self.levels[k]).mean(axis=1)
        return self.tree.level_probs(k) @ means

    def subtree(self, k1, j=None):
        levels = []
        for k in range(k1, self.tree.K + 1):
            if j is None:
                levels.append(self.levels[k])
            else:
                a, b = self.tree.descendants(k1, j, k)
                levels.append(self.levels[k][a:b])
        return ParticleEnsemble(self.tree.subtree(k1, j), levels)

    def to_csv(self, path, value_name="x"):
        write_level_csv(path, self.levels, value_name)


def conditional_mean(ens, k, j):
    return ens.conditional_mean(k, j)


def conditional_measure(ens, k, j):
    return ens.conditional_measure(k, j)


def write_level_csv(path, levels, value_name="x"):
    """Rows ``k, j, i, v1..vn`` for a per-level field."""
    n = levels[0].shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "j", "i"] + [f"{value_name}{d + 1}" for d in range(n)])
        for k, lv in enumerate(levels):
            lv = np.asarray(lv)
            for j in range(lv.shape[0]):
                for i in range(lv.shape[1]):
                    writer.writerow([k, j, i] + [repr(float(v)) for v in lv[j, i]])


class ControlField:
    """Adapted field on levels ``0..K-1``: ``levels[k]`` has shape (nodes at k, N, n).

    The inner product is the discrete Hilbert pairing
    ``sum_k dt sum_j P(j) (1/N) sum_i a . b``.
    """

    def __init__(self, tree, levels):
        self.tree = tree
        self.levels = list(levels)

    @classmethod
    def zeros(cls, tree, N, n):
        return cls(tree, [ALLOCATOR.zeros((tree.n_nodes(k), N, n)) for k in range(tree.K)])

    @classmethod
    def constant(cls, tree, N, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        f = cls.zeros(tree, N, value.shape[0])
        for lv in f.levels:
            lv[...] = value
        return f

    @classmethod
    def random(cls, tree, N, n, seed, scale=1.0):
        f = cls.zeros(tree, N, n)
        for k, lv in enumerate(f.levels):
            lv[...] = scale * _rng.normal_nodes(seed, _rng.CHANNEL_CONTROL, k, 0, lv.shape[0], N, n)
        return f

    @property
    def N(self):
        return self.levels[0].shape[1]

    @property
    def n(self):
        return self.levels[0].shape[2]

    def copy(self):
        out = []
        for lv in self.levels:
            a = ALLOCATOR.empty(lv.shape)
            a[...] = lv
            out.append(a)
        return ControlField(self.tree, out)

    def axpy(self, alpha, other):
        """In place ``self += alpha * other``."""
        for a, b in zip(self.levels, other.levels):
            a += alpha * np.asarray(b)
        return self

    def scale(self, alpha):
        for a in self.levels:
            a *= alpha
        return self

    def combine(self, alpha, other):
        """New field ``self + alpha * other``."""
        return self.copy().axpy(alpha, other)

    def inner(self, other):
        return inner_product(self.tree, self.levels, other.levels)

    def norm(self):
        return float(np.sqrt(max(self.inner(self), 0.0)))

    def rms(self):
        """Root-mean-square norm per unit time."""
        return self.norm() / np.sqrt(self.tree.grid.T - self.tree.grid.t0)

    def max_abs_diff(self, other):
        return max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(self.levels, other.levels))

    def subtree(self, k1, j=None):
        levels = []
        for k in range(k1, self.tree.K):
            if j is None:
                levels.append(self.levels[k])
            else:
                a, b = self.tree.descendants(k1, j, k)
                levels.append(self.levels[k][a:b])
        return ControlField(self.tree.subtree(k1, j), levels)

    def to_csv(self, path):
        write_level_csv(path, self.levels, "u")


def level_inner(probs, a, b):
    """sum_j probs[j] (1/N) sum_i a_ji . b_ji for one level."""
    a, b = np.asarray(a), np.asarray(b)
    return float(probs @ np.einsum("jid,jid->j", a, b)) / a.shape[1]


def inner_product(tree, levels_a, levels_b):
    dt = tree.dt
    return dt * sum(level_inner(tree.level_probs(k), a, b) for k, (a, b) in enumerate(zip(levels_a, levels_b)))


def simulate_forward(spec, u, tree, noise, init):
    """Euler–Maruyama states ``X[k+1] = X[k] + u[k] dt + sigma dW + beta db`` on the tree."""
    from ._engine import forward_states

    return ParticleEnsemble(tree, forward_states(spec.sigma, spec.beta, tree, noise, init, u.levels))
