"""Empirical measures, pushforwards, mixtures and the 1-D Wasserstein-2 distance."""
import csv
from dataclasses import dataclass

import numpy as np

WEIGHT_TOL = 1e-12
MERGE_TOL = 1e-14


class DomainError(ValueError):
    """A map was undefined (non-finite or missing) at a support point."""


class UnsupportedDimensionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finitely supported probability measure on R^n.

    Parameters:
        points: array of shape (N, n) (a 1-D array is read as N points in R^1).
        weights: nonnegative array of shape (N,) summing to one; uniform if omitted.
    """

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("points must have shape (N, n) with N >= 1")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError("points and weights must have equal length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def mean(self):
        return self.weights @ self.points

    def is_equal_weight(self):
        return np.allclose(self.weights, 1.0 / self.size, rtol=0, atol=1e-15)

    @classmethod
    def dirac(cls, x):
        return cls(np.atleast_2d(np.asarray(x, dtype=float)))

    def to_csv(self, path):
        """Write one row per atom: weight, x1..xn."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["weight"] + [f"x{d + 1}" for d in range(self.dim)])
            for w, x in zip(self.weights, self.points):
                writer.writerow([repr(float(w))] + [repr(float(v)) for v in x])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:], data[:, 0])


def _merge_atoms(points, weights, tol=MERGE_TOL):
    """Merge atoms closer than ``tol`` (sup norm) and drop zero weights."""
    keep = weights > 0
    points, weights = points[keep], weights[keep]
    order = np.lexsort(points.T[::-1])
    points, weights = points[order], weights[order]
    out_pts, out_w = [points[0]], [weights[0]]
    for x, w in zip(points[1:], weights[1:]):
        if np.max(np.abs(x - out_pts[-1])) <= tol:
            out_w[-1] += w
        else:
            out_pts.append(x)
            out_w.append(w)
    w = np.array(out_w)
    return np.array(out_pts), w / w.sum()


def pushforward(field, m):
    """Image measure of ``m`` under ``field``.

    ``field`` is either a callable applied to the (N, n) support array or an
    array of its values on the support. Weights are carried over unchanged.
    """
    values = field(m.points) if callable(field) else field
    values = np.asarray(values, dtype=float)
    if values.ndim == 1 and m.dim == 1:
        values = values[:, None]
    if values.shape != m.points.shape:
        raise DomainError(f"field values have shape {values.shape}, expected {m.points.shape}")
    bad = ~np.all(np.isfinite(values), axis=1)
    if np.any(bad):
        raise DomainError(f"field undefined at support point {int(np.argmax(bad))}")
    return EmpiricalMeasure(values, m.weights.copy())


def mix(m, m2, eps):
    """The mixture (1 - eps) m + eps m2 on the union of supports."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    if m.dim != m2.dim:
        raise ValueError("measures live in different dimensions")
    pts = np.vstack([m.points, m2.points])
    w = np.concatenate([(1.0 - eps) * m.weights, eps * m2.weights])
    pts, w = _merge_atoms(pts, w)
    return EmpiricalMeasure(pts, w)


def wasserstein2_1d(m, m2):
    """Exact W2 distance between measures on the real line (monotone coupling)."""
    if m.dim != 1 or m2.dim != 1:
        raise UnsupportedDimensionError("exact W2 is only available in dimension 1")
    ia, ib = np.argsort(m.points[:, 0]), np.argsort(m2.points[:, 0])
    xa, wa = m.points[ia, 0], m.weights[ia]
    xb, wb = m2.points[ib, 0], m2.weights[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    # integrate |F^-1 - G^-1|^2 over the merged quantile breakpoints
    cuts = np.union1d(ca, cb)
    # cumulative sums that agree up to rounding would leave slivers with a large quantile gap
    cuts = cuts[np.concatenate([np.diff(cuts) > WEIGHT_TOL, [True]])]
    lengths = np.diff(np.concatenate([[0.0], cuts]))
    mid = cuts - 0.5 * lengths
    qa = xa[np.minimum(np.searchsorted(ca, mid), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), len(xb) - 1)]
    return float(np.sqrt(np.sum(lengths * (qa - qb) ** 2)))


def second_moment(m):
    """Integral of |x|^2 against m."""
    return float(m.weights @ np.sum(m.points**2, axis=1))
