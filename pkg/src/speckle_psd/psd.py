"""Particle size distributions and their cumulative representation.

Radii are in micrometers throughout. The density is number-based: p(r) is
the probability density of a particle having radius r, normalized so that
the trapezoidal integral over the grid equals one. The cumulative curve
C(r) = integral of p from r_min to r is the monotone representation used
as the inversion variable; it is also what an empirical particle count
converges to, so both analytic and sample-based constructors live here.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AllZeroError,
    GridMismatchError,
    NegativeWeightError,
    NonMonotoneInputError,
)

DEFAULT_R_MIN_UM = 50.0
DEFAULT_R_MAX_UM = 1000.0
DEFAULT_N_BINS = 192

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class RadiusGrid:
    """Uniform radius grid on [r_min_um, r_max_um] with n_bins samples."""

    r_min_um: float = DEFAULT_R_MIN_UM
    r_max_um: float = DEFAULT_R_MAX_UM
    n_bins: int = DEFAULT_N_BINS

    def __post_init__(self):
        if not (0.0 < self.r_min_um < self.r_max_um):
            raise ValueError("require 0 < r_min < r_max")
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")

    @property
    def radii_um(self) -> np.ndarray:
        return np.linspace(self.r_min_um, self.r_max_um, self.n_bins)

    @property
    def spacing_um(self) -> float:
        return (self.r_max_um - self.r_min_um) / (self.n_bins - 1)

    def trapezoid_weights(self) -> np.ndarray:
        """Quadrature weights so that integral(f) = weights @ f."""
        w = np.full(self.n_bins, self.spacing_um)
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def coarsened(self, out_bins: int) -> "RadiusGrid":
        if self.n_bins % out_bins != 0:
            raise ValueError(f"{out_bins} does not divide {self.n_bins}")
        group = self.n_bins // out_bins
        centers = self.radii_um.reshape(out_bins, group).mean(axis=1)
        # group centers are uniformly spaced; rebuild an equivalent grid
        return RadiusGrid(float(centers[0]), float(centers[-1]), out_bins)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ParticleSizeDistribution:
    """Number-basis density on a radius grid, trapezoid-normalized to 1."""

    grid: RadiusGrid
    density: np.ndarray  # per-um probability density, one value per bin

    def __post_init__(self):
        object.__setattr__(self, "density", _freeze(self.density))

    def integral(self) -> float:
        return float(self.grid.trapezoid_weights() @ self.density)

    def mean_radius_um(self) -> float:
        w = self.grid.trapezoid_weights()
        return float(w @ (self.density * self.grid.radii_um))

    def normalization_constant(self) -> float:
        """Squared first moment |integral p(r) r dr|^2."""
        return self.mean_radius_um() ** 2

    def to_volume_basis(self) -> "ParticleSizeDistribution":
        """Display-time reweighting by r^3, renormalized.

        The number basis is canonical; this is only for plots that show
        volume fractions.
        """
        return make_psd(self.grid, self.density * self.grid.radii_um**3)


@dataclass(frozen=True)
class CumulativeDistribution:
    """Monotone curve from 0-ish to 1 over the radius grid."""

    grid: RadiusGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(np.diff(v) < -1e-12):
            raise NonMonotoneInputError("cumulative values must be non-decreasing")
        if v[0] < -1e-12 or abs(v[-1] - 1.0) > 1e-6:
            raise ValueError("cumulative must start >= 0 and end at 1")
        object.__setattr__(self, "values", _freeze(v))


def make_psd(grid: RadiusGrid, raw_weights) -> ParticleSizeDistribution:
    """Normalize nonnegative weights into a valid PSD.

    Raises AllZeroError when nothing is positive and NegativeWeightError
    (with the offending index) on any negative entry.
    """
    w = np.asarray(raw_weights, dtype=float)
    if w.shape != (grid.n_bins,):
        raise ValueError(f"expected {grid.n_bins} weights, got shape {w.shape}")
    neg = np.flatnonzero(w < 0)
    if neg.size:
        i = int(neg[0])
        raise NegativeWeightError(i, float(w[i]))
    total = float(grid.trapezoid_weights() @ w)
    if total <= 0.0:
        raise AllZeroError("weights carry no mass")
    return ParticleSizeDistribution(grid, w / total)


def delta_psd(grid: RadiusGrid, radius_um: float) -> ParticleSizeDistribution:
    """Single-bin spike at the grid point nearest radius_um."""
    w = np.zeros(grid.n_bins)
    w[int(np.argmin(np.abs(grid.radii_um - radius_um)))] = 1.0
    return make_psd(grid, w)


def gaussian_psd(grid: RadiusGrid, center_um: float, width_um: float) -> ParticleSizeDistribution:
    """Gaussian bump truncated to the grid, normalized."""
    w = np.exp(-0.5 * ((grid.radii_um - center_um) / width_um) ** 2)
    return make_psd(grid, w)


def band_psd(grid: RadiusGrid, lo_um: float, hi_um: float) -> ParticleSizeDistribution:
    """Uniform density over [lo_um, hi_um] (a sieve band), zero elsewhere."""
    r = grid.radii_um
    w = ((r >= lo_um) & (r <= hi_um)).astype(float)
    return make_psd(grid, w)


def cumulative_of(psd: ParticleSizeDistribution) -> CumulativeDistribution:
    """Trapezoidal running integral of the density, renormalized to end at 1."""
    r = psd.grid.radii_um
    p = psd.density
    seg = (p[1:] + p[:-1]) * 0.5 * np.diff(r)
    c = np.concatenate([[0.0], np.cumsum(seg)])
    c /= c[-1]
    return CumulativeDistribution(psd.grid, c)


def psd_of_cumulative(c: CumulativeDistribution, out_bins: int) -> ParticleSizeDistribution:
    """Differentiate a cumulative curve and rebin to out_bins.

    The finite-difference derivative is taken on the native grid, then
    adjacent samples are averaged in contiguous groups (n_bins must be a
    multiple of out_bins), and the result is renormalized.
    """
    grid = c.grid
    if grid.n_bins % out_bins != 0:
        raise ValueError(f"{out_bins} does not divide {grid.n_bins}")
    v = c.values
    if np.any(np.diff(v) < -1e-12):
        raise NonMonotoneInputError("cumulative values must be non-decreasing")
    dr = grid.spacing_um
    # forward difference; the first sample also absorbs any mass at or below
    # r_min (v[0] > 0), which collapses to p[0] = v[1]/dr
    n = grid.n_bins
    p = np.empty(n)
    p[0] = v[1] / dr
    p[1:-1] = np.diff(v)[1:] / dr
    p[-1] = (v[-1] - v[-2]) / dr
    p = np.maximum(p, 0.0)
    group = grid.n_bins // out_bins
    p_out = p.reshape(out_bins, group).mean(axis=1)
    return make_psd(grid.coarsened(out_bins), p_out)


def derivative_matrix(grid: RadiusGrid, out_bins: int) -> np.ndarray:
    """Linear map (out_bins x n_bins) sending cumulative samples to the
    rebinned unnormalized density of psd_of_cumulative (before clipping)."""
    n = grid.n_bins
    if n % out_bins != 0:
        raise ValueError(f"{out_bins} does not divide {n}")
    dr = grid.spacing_um
    diff = np.zeros((n, n))
    diff[0, 1] = 1.0 / dr
    idx = np.arange(1, n - 1)
    diff[idx, idx + 1] = 1.0 / dr
    diff[idx, idx] = -1.0 / dr
    diff[n - 1, n - 1] = 1.0 / dr
    diff[n - 1, n - 2] = -1.0 / dr
    group = n // out_bins
    rebin = np.zeros((out_bins, n))
    for j in range(out_bins):
        rebin[j, j * group : (j + 1) * group] = 1.0 / group
    return rebin @ diff


def wasserstein_1d(a: CumulativeDistribution, b: CumulativeDistribution) -> float:
    """1-Wasserstein distance: mean |C_a - C_b| scaled by the grid extent."""
    if a.grid != b.grid:
        raise GridMismatchError("cumulative curves live on different grids")
    extent = a.grid.r_max_um - a.grid.r_min_um
    return float(np.mean(np.abs(a.values - b.values)) * extent)


class RadiusSampler:
    """Inverse-CDF sampler treating each bin's quadrature mass as an atom
    at its node.  Draws land on grid nodes (the density's own resolution)
    and a single-bin spike samples its node exactly."""

    def __init__(self, psd: ParticleSizeDistribution):
        masses = psd.grid.trapezoid_weights() * psd.density
        cum = np.cumsum(masses)
        self._cum = cum / cum[-1]
        self._radii = psd.grid.radii_um

    def draw(self, q) -> np.ndarray:
        idx = np.searchsorted(self._cum, np.asarray(q, dtype=float), side="left")
        return self._radii[np.clip(idx, 0, self._radii.size - 1)]


def sample_radii(psd: ParticleSizeDistribution, n: int, rng_seed) -> np.ndarray:
    """Draw n radii by inverse-CDF sampling; deterministic for a fixed seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    return RadiusSampler(psd).draw(rng.random(n))


def empirical_cumulative(radii_um, grid: RadiusGrid) -> CumulativeDistribution:
    """Fraction of particles with radius <= r, evaluated at the grid points.

    This is the direct particle-count reading of the cumulative curve: stack
    every particle at the center and the normalized vertical extent at each
    radius is exactly this staircase.
    """
    radii = np.sort(np.asarray(radii_um, dtype=float))
    if radii.size == 0:
        raise AllZeroError("no particles")
    counts = np.searchsorted(radii, grid.radii_um, side="right")
    v = counts / radii.size
    if v[-1] < 1.0:  # particles above r_max would break the endpoint contract
        raise ValueError("all radii must lie within the grid range")
    return CumulativeDistribution(grid, v)


# ---------------------------------------------------------------------------
# serialization: CSV with header r_um,value plus a JSON sidecar for the grid


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_psd(psd: ParticleSizeDistribution, path, basis: str = "number") -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["r_um", "value"])
        for r, v in zip(psd.grid.radii_um, psd.density):
            writer.writerow([f"{r:.10g}", f"{v:.10g}"])
    meta = {
        "r_min": psd.grid.r_min_um,
        "r_max": psd.grid.r_max_um,
        "n_bins": psd.grid.n_bins,
        "basis": basis,
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=1))


def load_psd(path) -> ParticleSizeDistribution:
    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text())
    grid = RadiusGrid(meta["r_min"], meta["r_max"], meta["n_bins"])
    values = _read_csv_values(path)
    return make_psd(grid, values)


def save_cumulative(c: CumulativeDistribution, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["r_um", "value"])
        for r, v in zip(c.grid.radii_um, c.values):
            writer.writerow([f"{r:.10g}", f"{v:.10g}"])
    meta = {
        "r_min": c.grid.r_min_um,
        "r_max": c.grid.r_max_um,
        "n_bins": c.grid.n_bins,
        "basis": "number",
    }
    _sidecar_path(path).write_text(json.dumps(meta, indent=1))


def load_cumulative(path) -> CumulativeDistribution:
    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text())
    grid = RadiusGrid(meta["r_min"], meta["r_max"], meta["n_bins"])
    return CumulativeDistribution(grid, _read_csv_values(path))


def _read_csv_values(path: Path) -> np.ndarray:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["r_um", "value"]:
            raise ValueError(f"unexpected CSV header {header!r}")
        return np.array([float(row[1]) for row in reader])
