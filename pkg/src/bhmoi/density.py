"""Densities on a shared evaluation grid and overlap metrics between them.

Every density handled by the clustering code lives on a :class:`SupportGrid`.
Integrals are trapezoid sums on the uniform grid; a grid flagged ``discrete``
holds a probability mass function on consecutive integers and integrals become
plain sums.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "SupportGrid",
    "GriddedDensity",
    "SampleSet",
    "silverman_bandwidth",
    "build_common_grid",
    "density_from_samples",
    "ovl",
    "total_variation",
    "mixture_mean",
    "stack_values",
]

MIN_POINTS = 16
NORM_TOL = 1e-6


@dataclass(frozen=True)
class SupportGrid:
    lower: float
    upper: float
    points: int
    discrete: bool = False

    def __post_init__(self):
        if self.discrete:
            if self.points < 1:
                raise ValueError("discrete grid needs at least one point")
            if self.lower != math.floor(self.lower):
                raise ValueError("discrete grid must start on an integer")
            object.__setattr__(self, "lower", float(self.lower))
            object.__setattr__(self, "upper", float(self.lower + self.points - 1))
            return
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("grid bounds must be finite")
        if not self.lower < self.upper:
            raise ValueError(f"grid needs lower < upper, got [{self.lower}, {self.upper}]")
        if self.points < MIN_POINTS:
            raise ValueError(f"grid needs at least {MIN_POINTS} points, got {self.points}")
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        object.__setattr__(self, "points", int(self.points))

    @classmethod
    def integers(cls, lower: int, upper: int) -> "SupportGrid":
        """Unit-spaced grid over ``lower..upper`` for probability mass functions."""
        return cls(float(lower), float(upper), int(upper - lower + 1), discrete=True)

    @property
    def step(self) -> float:
        if self.discrete:
            return 1.0
        return (self.upper - self.lower) / (self.points - 1)

    @cached_property
    def t(self) -> np.ndarray:
        if self.discrete:
            t = self.lower + np.arange(self.points, dtype=float)
        else:
            t = np.linspace(self.lower, self.upper, self.points)
        t.flags.writeable = False
        return t

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights: trapezoid on a continuous grid, ones on a discrete one."""
        if self.discrete:
            w = np.ones(self.points)
        else:
            w = np.full(self.points, self.step)
            w[0] = w[-1] = 0.5 * self.step
        w.flags.writeable = False
        return w

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) @ self.weights


@dataclass(frozen=True, eq=False)
class GriddedDensity:
    """Non-negative density values on ``grid``, renormalized on construction."""

    grid: SupportGrid
    values: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.points,):
            raise ValueError(f"expected {self.grid.points} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("density values must be finite")
        if np.any(v < 0):
            raise ValueError("density values must be non-negative")
        mass = float(self.grid.integrate(v))
        if mass <= 0:
            raise ValueError("density has zero mass on the grid")
        v /= mass
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, grid: SupportGrid, fn: Callable[[np.ndarray], np.ndarray]) -> "GriddedDensity":
        return cls(grid, fn(grid.t))

    @property
    def mass(self) -> float:
        return float(self.grid.integrate(self.values))

    def mean(self) -> float:
        return float(self.grid.integrate(self.grid.t * self.values))


@dataclass(frozen=True)
class SampleSet:
    draws: np.ndarray
    label: str = ""

    def __post_init__(self):
        d = np.array(self.draws, dtype=float).ravel()
        if d.size == 0:
            raise ValueError(f"sample set {self.label!r} is empty")
        if not np.all(np.isfinite(d)):
            raise ValueError(f"sample set {self.label!r} contains non-finite draws")
        d.flags.writeable = False
        object.__setattr__(self, "draws", d)


def silverman_bandwidth(x: np.ndarray) -> float:
    """0.9 * min(sd, IQR/1.34) * n^(-1/5); falls back to whichever spread is
    non-zero, and returns 0 for a sample without spread."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return 0.0
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25) / 1.34
    spread = min(sd, iqr)
    if spread <= 0:
        spread = max(sd, iqr)
    return 0.9 * spread * n ** -0.2


def _degenerate_eps(x: float) -> float:
    return max(abs(x), 1.0) * 1e-6


def build_common_grid(
    sample_sets: Sequence[SampleSet], points: int = 512, extension: float = 3.0
) -> SupportGrid:
    """Grid covering every draw, padded by ``extension`` pooled bandwidths."""
    if len(sample_sets) == 0:
        raise ValueError("no sample sets")
    if extension < 0:
        raise ValueError("extension must be non-negative")
    pooled = np.concatenate([np.asarray(s.draws, dtype=float) for s in sample_sets])
    if not np.all(np.isfinite(pooled)):
        raise ValueError("non-finite draw in sample sets")
    lo, hi = float(pooled.min()), float(pooled.max())
    pad = extension * silverman_bandwidth(pooled)
    lower, upper = lo - pad, hi + pad
    if not upper > lower:
        eps = _degenerate_eps(lo)
        lower, upper = lo - eps, hi + eps
    return SupportGrid(lower, upper, points)


def _linear_bin(x: np.ndarray, grid: SupportGrid) -> np.ndarray:
    pos = (x - grid.lower) / grid.step
    inside = (pos >= 0) & (pos <= grid.points - 1)
    pos = pos[inside]
    left = np.minimum(np.floor(pos).astype(np.int64), grid.points - 2)
    frac = pos - left
    counts = np.bincount(left, weights=1.0 - frac, minlength=grid.points)
    counts += np.bincount(left + 1, weights=frac, minlength=grid.points)
    return counts


def density_from_samples(
    samples: SampleSet, grid: SupportGrid, bandwidth: float | None = None
) -> GriddedDensity:
    """Gaussian KDE of ``samples`` evaluated on ``grid``.

    Draws are linearly binned onto the grid and the bin counts convolved with
    the sampled Gaussian kernel, so the cost does not grow with the grid-draw
    product. A sample with no spread yields a spike at grid resolution and
    ``degenerate=True``.
    """
    x = np.asarray(samples.draws, dtype=float)
    if grid.discrete:
        # pmf branch: relative frequencies on the integer support
        idx = np.rint(x - grid.lower).astype(np.int64)
        ok = (idx >= 0) & (idx < grid.points)
        if not ok.any():
            raise ValueError(f"no draws of {samples.label!r} fall on the grid")
        return GriddedDensity(grid, np.bincount(idx[ok], minlength=grid.points).astype(float))

    counts = _linear_bin(x, grid)
    if counts.sum() <= 0:
        raise ValueError(f"no draws of {samples.label!r} fall on the grid")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if h <= 0:
        warnings.warn(f"sample set {samples.label!r} has zero spread; using a spike density")
        return GriddedDensity(grid, counts / grid.step, degenerate=True)

    half = min(grid.points - 1, int(math.ceil(8.0 * h / grid.step)))
    u = np.arange(-half, half + 1) * grid.step / h
    kernel = np.exp(-0.5 * u * u)
    kernel /= kernel.sum() * grid.step
    smoothed = np.convolve(counts, kernel)[half : half + grid.points]
    return GriddedDensity(grid, np.maximum(smoothed, 0.0))


def _check_same_grid(f: GriddedDensity, g: GriddedDensity) -> None:
    if f.grid != g.grid:
        raise ValueError("grid mismatch")


def ovl(f: GriddedDensity, g: GriddedDensity) -> float:
    """Overlapping coefficient: integral of min(f, g), clamped to [0, 1]."""
    _check_same_grid(f, g)
    v = float(f.grid.integrate(np.minimum(f.values, g.values)))
    return min(1.0, max(0.0, v))


def total_variation(f: GriddedDensity, g: GriddedDensity) -> float:
    return 1.0 - ovl(f, g)


def mixture_mean(members: Sequence[GriddedDensity]) -> GriddedDensity:
    if len(members) == 0:
        raise ValueError("empty cluster")
    grid = members[0].grid
    for m in members[1:]:
        _check_same_grid(members[0], m)
    if len(members) == 1:
        return members[0]
    return GriddedDensity(grid, np.mean([m.values for m in members], axis=0))


def stack_values(densities: Sequence[GriddedDensity]) -> tuple[SupportGrid, np.ndarray]:
    """Shared grid and an (n, points) matrix of values."""
    if len(densities) == 0:
        raise ValueError("no densities")
    for d in densities[1:]:
        _check_same_grid(densities[0], d)
    return densities[0].grid, np.vstack([d.values for d in densities])
