"""Shared numerical helpers: RNG streams, log-space reductions, quadrature
nodes, and grid-based one-dimensional posteriors with inverse-CDF sampling.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError


def make_rng(seed: int, *stream) -> np.random.Generator:
    """A counter-based (Philox) generator on a named, reproducible stream.

    Stream components may be ints or strings; strings are hashed with a
    stable CRC so the mapping never changes across runs or platforms.
    """
    key = tuple(
        part if isinstance(part, int) else zlib.crc32(part.encode())
        for part in stream
    )
    ss = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def log_mean_exp(a: np.ndarray, axis=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = a.size if axis is None else a.shape[axis]
    return logsumexp(a, axis=axis) - np.log(n)


def gauss_legendre_01(num_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped from [-1, 1] to (0, 1)."""
    x, w = np.polynomial.legendre.leggauss(num_nodes)
    return (x + 1.0) / 2.0, w / 2.0


def unit_grid(size: int, upper: float = 1.0) -> np.ndarray:
    """Uniform grid (upper/size, 2*upper/size, ..., upper) on (0, upper]."""
    return np.arange(1, size + 1, dtype=float) * (upper / size)


@dataclass
class GridPosterior:
    """A univariate density known on a grid, normalized by the trapezoid
    rule, sampled by linear inverse-CDF interpolation."""

    grid: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray

    @classmethod
    def from_log_density(cls, grid: np.ndarray, log_density: np.ndarray) -> "GridPosterior":
        peak = np.max(log_density)
        if not np.isfinite(peak):
            raise NumericalError("grid posterior has no finite density values")
        w = np.exp(log_density - peak)
        dx = np.diff(grid)
        seg = 0.5 * (w[:-1] + w[1:]) * dx
        cdf = np.concatenate([[0.0], np.cumsum(seg)])
        total = cdf[-1]
        if total <= 0:
            raise NumericalError("grid posterior integrates to zero")
        return cls(grid=grid, pdf=w / total, cdf=cdf / total)

    def ppf(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        j = np.searchsorted(self.cdf, t, side="left")
        j = np.clip(j, 1, len(self.grid) - 1)
        lo, hi = self.cdf[j - 1], self.cdf[j]
        width = hi - lo
        frac = np.where(width > 0, (t - lo) / np.where(width > 0, width, 1.0), 0.0)
        return self.grid[j - 1] + frac * (self.grid[j] - self.grid[j - 1])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.ppf(rng.random(size))

    def cdf_at(self, x: np.ndarray) -> np.ndarray:
        return np.interp(x, self.grid, self.cdf)
