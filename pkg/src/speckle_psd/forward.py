"""Closed-form map from a size distribution to the averaged autocorrelation.

The ensemble-averaged profile factorizes into a beam-geometry envelope
4 sin^2(D u / 2) / (D u)^2, which pins the lobe spacing, and a size kernel
| integral p(r) sin(r u) / u dr |^2, which modulates the side-lobe
heights.  With the normalization constant C = (integral p r dr)^2 the
product equals one at u = 0.

Also here: the single-realization coherent sum over particles (whose mean
over many random draws converges to the closed form), the Monte Carlo
check of the position-average identity, and the focal-length retuning
that trades large-size accuracy for small-size reach.

u is everywhere the reduced frequency 2*pi*u'/(lambda*f3) in rad/um.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit, prange

from .autocorr import AutocorrProfile
from .errors import ZeroFirstMomentError
from .psd import ParticleSizeDistribution, RadiusSampler
from .surface import OpticsConfig


@dataclass(frozen=True)
class ForwardConfig:
    optics: OpticsConfig
    u_per_um: np.ndarray
    include_normalization: bool = True

    def __post_init__(self):
        u = np.ascontiguousarray(self.u_per_um, dtype=float)
        if u.size < 2 or np.any(np.diff(u) <= 0) or u[0] < 0:
            raise ValueError("u grid must be strictly increasing and start at or near 0")
        u.flags.writeable = False
        object.__setattr__(self, "u_per_um", u)


def default_u_grid(optics: OpticsConfig, samples_per_lobe: int = 8, n_zeros: int = 6,
                   include_zero: bool = True) -> np.ndarray:
    """Uniform u grid resolving the envelope lobes out to the n_zeros-th zero."""
    du = 2.0 * np.pi / optics.beam_diameter_um / samples_per_lobe
    n = int(round(n_zeros * samples_per_lobe))
    start = 0 if include_zero else 1
    return np.arange(start, n + 1) * du


def envelope(u_per_um, beam_diameter_um: float) -> np.ndarray:
    """4 sin^2(D u / 2) / (D u)^2 with the analytic limit 1 at u = 0."""
    if beam_diameter_um <= 0:
        raise ValueError("beam diameter must be positive")
    x = np.asarray(u_per_um, dtype=float) * beam_diameter_um / 2.0
    return np.sinc(x / np.pi) ** 2


def envelope_zero(k: int, beam_diameter_um: float) -> float:
    """u position of the k-th envelope zero, 2 pi k / D."""
    return 2.0 * np.pi * k / beam_diameter_um


def lobe_band(u_per_um, beam_diameter_um: float, zero_lo: int = 2, zero_hi: int = 6) -> np.ndarray:
    """Boolean mask for the band between two envelope zeros.

    The informative side-lobe region spanning lobes 2..5 is the interval
    between the 2nd and 6th zeros (the default).
    """
    u = np.asarray(u_per_um, dtype=float)
    return (u >= envelope_zero(zero_lo, beam_diameter_um)) & (
        u <= envelope_zero(zero_hi, beam_diameter_um)
    )


def size_kernel(psd: ParticleSizeDistribution, u_per_um) -> np.ndarray:
    """| integral p(r) sin(r u)/u dr |^2 by trapezoid quadrature.

    The u -> 0 limit is the squared mean radius, handled analytically via
    sin(ru)/u = r * sinc(ru/pi).
    """
    u = np.asarray(u_per_um, dtype=float)
    r = psd.grid.radii_um
    wp = psd.grid.trapezoid_weights() * psd.density
    # sin(r u) / u = r * sinc(r u / pi), finite at u = 0
    integrand = r[None, :] * np.sinc(np.outer(u, r) / np.pi)
    return (integrand @ wp) ** 2


def forward(psd: ParticleSizeDistribution, cfg: ForwardConfig) -> AutocorrProfile:
    """Envelope times size kernel, optionally divided by C = (mean radius)^2."""
    env = envelope(cfg.u_per_um, cfg.optics.beam_diameter_um)
    ker = size_kernel(psd, cfg.u_per_um)
    values = env * ker
    if cfg.include_normalization:
        c = psd.normalization_constant()
        if c <= 0.0 or not np.isfinite(c):
            raise ZeroFirstMomentError("PSD first moment is zero")
        values = values / c
    return AutocorrProfile(cfg.u_per_um, values, frames_averaged=0)


def stochastic_forward(positions_um, radii_um, u_per_um) -> AutocorrProfile:
    """Single-realization profile | sum_i sin(r_i u)/u * e^{j u x_i} |^2."""
    x = np.atleast_1d(np.asarray(positions_um, dtype=float))
    r = np.atleast_1d(np.asarray(radii_um, dtype=float))
    if x.size == 0:
        raise ValueError("particle list is empty")
    u = np.asarray(u_per_um, dtype=float)
    amp = r[:, None] * np.sinc(np.outer(r, u) / np.pi)
    z = np.sum(amp * np.exp(1j * np.outer(x, u)), axis=0)
    return AutocorrProfile(u, np.abs(z) ** 2, frames_averaged=1)


@njit(cache=True, parallel=True, fastmath=True)
def _mc_accumulate(radii, xs, du, n_u):  # pragma: no cover - numba kernel
    n_real, n_part = radii.shape
    out = np.zeros(n_u)
    for m in prange(n_real):
        zr = np.zeros(n_u)
        zi = np.zeros(n_u)
        for i in range(n_part):
            ca = np.cos(xs[m, i] * du)
            sa = np.sin(xs[m, i] * du)
            cb = np.cos(radii[m, i] * du)
            sb = np.sin(radii[m, i] * du)
            ar, ai = 1.0, 0.0
            br, bi = 1.0, 0.0
            for k in range(n_u):
                ar, ai = ar * ca - ai * sa, ar * sa + ai * ca
                br, bi = br * cb - bi * sb, br * sb + bi * cb
                zr[k] += bi * ar
                zi[k] += bi * ai
        for k in range(n_u):
            u = (k + 1) * du
            out[k] += (zr[k] * zr[k] + zi[k] * zi[k]) / (u * u)
    return out


def stochastic_forward_mean(
    psd: ParticleSizeDistribution,
    beam_diameter_um: float,
    n_particles: int,
    n_realizations: int,
    u_per_um,
    rng_seed,
    chunk: int = 250,
) -> AutocorrProfile:
    """Mean of stochastic_forward over independent theory realizations.

    Each realization draws n_particles radii from the PSD and positions
    uniformly on [-D/2, D/2] (independently, as in the ensemble-average
    derivation), evaluates the coherent sum, and accumulates the squared
    modulus.  Identical to averaging stochastic_forward outputs; the phase
    factors are built by incremental rotation so large budgets stay fast.
    Requires a uniform u grid with u_k = k * du starting at k = 1.
    """
    u = np.asarray(u_per_um, dtype=float)
    du = u[0]
    if du <= 0 or not np.allclose(np.diff(u), du, rtol=1e-9):
        raise ValueError("u grid must be uniform with first sample at u = du")
    rng = np.random.default_rng(rng_seed)
    sampler = RadiusSampler(psd)
    acc = np.zeros(u.size)
    done = 0
    while done < n_realizations:
        c = min(chunk, n_realizations - done)
        radii = sampler.draw(rng.random((c, n_particles)))
        xs = rng.uniform(-beam_diameter_um / 2, beam_diameter_um / 2, (c, n_particles))
        acc += _mc_accumulate(radii, xs, du, u.size)
        done += c
    return AutocorrProfile(u, acc / n_realizations, frames_averaged=n_realizations)


def position_average_factor(n_pairs: int, beam_diameter_um: float, u_per_um, rng_seed) -> np.ndarray:
    """Monte Carlo estimate of <e^{-j u (x1 - x2)}> for uniform positions.

    Converges to the envelope; the imaginary part vanishes by symmetry, so
    the real part is returned.  u = 0 evaluates to exactly 1.
    """
    if n_pairs < 1000:
        raise ValueError("need at least 1e3 pairs for a usable estimate")
    rng = np.random.default_rng(rng_seed)
    u = np.asarray(u_per_um, dtype=float)
    out = np.zeros(u.size)
    chunk = max(1, min(n_pairs, 20_000_000 // max(u.size, 1)))
    done = 0
    while done < n_pairs:
        c = min(chunk, n_pairs - done)
        dx = rng.uniform(-beam_diameter_um / 2, beam_diameter_um / 2, c) - rng.uniform(
            -beam_diameter_um / 2, beam_diameter_um / 2, c
        )
        out += np.cos(np.outer(dx, u)).sum(axis=0)
        done += c
    return out / n_pairs


def tune_range(target_r_min_um: float, cfg: OpticsConfig,
               current_r_min_um: float = 50.0) -> OpticsConfig:
    """Rescale the collection focal length to move the sensitive size range.

    Shrinking f3 by target/current keeps the product r*u at the detector
    edge unchanged, so a target range starting at a smaller radius maps
    onto the same lobe structure, at the cost of accuracy at the large
    size end.
    """
    if target_r_min_um <= 0:
        raise ValueError("target r_min must be positive")
    scale = target_r_min_um / current_r_min_um
    return replace(cfg, focal_length_um=cfg.focal_length_um * scale)


def band_nrmse(measured: AutocorrProfile, reference: AutocorrProfile, band) -> float:
    """RMS of (measured - reference) over the band, relative to the RMS of
    the reference there.  Both profiles must share the u grid."""
    if not measured.same_grid(reference):
        raise ValueError("profiles live on different u grids")
    d = measured.values[band] - reference.values[band]
    ref = reference.values[band]
    return float(np.sqrt(np.mean(d**2) / np.mean(ref**2)))
