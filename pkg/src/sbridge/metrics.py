"""Two-sample comparisons between generated points and a target."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .mixtures import GaussianMixture
from .rng import Rng

EXACT_W2_LIMIT = 4096


def wasserstein2_exact(a, b) -> float:
    """W2 between equal-size uniform point clouds via optimal assignment."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"exact W2 needs equal sample counts, got {a.shape[0]} and {b.shape[0]}")
    if a.shape[0] == 0:
        return 0.0
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def sliced_wasserstein2(a, b, n_projections: int = 256, rng: Rng | None = None) -> float:
    """Root mean squared 1-D W2 over random unit directions (quantile matching)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    rng = rng or Rng(0)
    dirs = rng.normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        qs = (np.arange(max(len(pa), len(pb))) + 0.5) / max(len(pa), len(pb))
        pa = np.quantile(pa, qs, axis=0)
        pb = np.quantile(pb, qs, axis=0)
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


def w2_method(n: int, exact: bool | None = None) -> str:
    """``"exact"`` or ``"sliced"``: which estimator :func:`wasserstein2` uses for ``n`` points."""
    if exact is None:
        exact = n <= EXACT_W2_LIMIT
    return "exact" if exact else "sliced"


def wasserstein2(a, b, exact: bool | None = None) -> float:
    """W2 between point clouds.

    By default the exact assignment is used up to ``EXACT_W2_LIMIT`` points and
    the 256-direction sliced approximation above it; see :func:`w2_method`.
    """
    if w2_method(max(len(a), len(b)), exact) == "exact":
        return wasserstein2_exact(a, b)
    return sliced_wasserstein2(a, b)


def energy_distance(a, b) -> float:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("energy distance needs nonempty samples")
    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


@dataclass
class ModeReport:
    counts: np.ndarray
    fractions: np.ndarray
    radius: float
    missed: list[int]

    def to_text(self) -> str:
        lines = [f"mode_radius = {float(self.radius)!r}"]
        for i, (c, f) in enumerate(zip(self.counts, self.fractions)):
            lines.append(f"mode_{i}_count = {int(c)}")
            lines.append(f"mode_{i}_fraction = {float(f)!r}")
        lines.append(f"missed_modes = {','.join(map(str, self.missed))}")
        return "\n".join(lines)


def mode_coverage(samples, g: GaussianMixture, radius: float, min_count: int = 1) -> ModeReport:
    """Assign each sample to its nearest mean when within ``radius``.

    A mode is reported missed when fewer than ``min_count`` samples land on it.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if g.k > 1:
        gaps = cdist(g.means, g.means)
        np.fill_diagonal(gaps, np.inf)
        if radius >= gaps.min() / 2:
            raise ValueError(f"radius {radius} makes mode neighbourhoods overlap (min gap {gaps.min():.3g})")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    counts = np.zeros(g.k, dtype=np.int64)
    if samples.shape[0]:
        dist = cdist(samples, g.means)
        nearest = dist.argmin(axis=1)
        inside = dist[np.arange(len(nearest)), nearest] <= radius
        counts = np.bincount(nearest[inside], minlength=g.k)
    n = max(samples.shape[0], 1)
    fractions = counts / n
    missed = [i for i in range(g.k) if counts[i] < min_count]
    return ModeReport(counts, fractions, radius, missed)


@dataclass
class FieldGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # (len(ys), len(xs), 2)

    def __post_init__(self):
        if len(self.xs) < 2 or len(self.ys) < 2:
            raise ValueError("field grid needs at least 2 nodes per axis")

    @property
    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def header(self) -> str:
        lo_x, hi_x, lo_y, hi_y = (float(v) for v in (self.xs[0], self.xs[-1], self.ys[0], self.ys[-1]))
        return f"# grid xmin={lo_x!r} xmax={hi_x!r} ymin={lo_y!r} ymax={hi_y!r} nx={len(self.xs)} ny={len(self.ys)}"

    def to_csv(self) -> str:
        lines = [self.header(), "x,y,u,v"]
        pts = self.points
        vals = self.values.reshape(-1, 2)
        for row in np.hstack([pts, vals]).tolist():
            lines.append(",".join(map(repr, row)))
        return "\n".join(lines) + "\n"


def drift_field(drift, t: float, extent=(-6.0, 6.0, -6.0, 6.0), resolution: int = 21) -> FieldGrid:
    """Evaluate ``drift(t, points)`` on a regular 2-D grid."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    xmin, xmax, ymin, ymax = extent
    xs = np.linspace(xmin, xmax, resolution)
    ys = np.linspace(ymin, ymax, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    vals = np.asarray(drift(t, pts), dtype=np.float64).reshape(resolution, resolution, 2)
    return FieldGrid(xs, ys, vals)


def cosine_similarity(u, v) -> np.ndarray:
    """Row-wise cosine similarity."""
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    return np.sum(u * v, axis=1) / np.maximum(nu * nv, 1e-300)
