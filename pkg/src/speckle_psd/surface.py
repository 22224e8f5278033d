"""Random particle surfaces and coherent propagation to the detector.

Model: 1D object plane. Particles are opaque-free reflectors of unit
reflectivity occupying [x_i - r_i, x_i + r_i]; the amplitude mask is the
union of those intervals. A rough height profile rides on top of each
particle and fully scrambles the optical phase. The far-field intensity
on the detector is the squared modulus of the scaled Fourier transform
of mask * phase.

All lengths in micrometers. The detector grid is the FFT conjugate of
the object grid: pitch = wavelength * focal_length / object_extent.
"""
from __future__ import annotations

import json
import warnings
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BeamTooSmallError
from .psd import ParticleSizeDistribution, RadiusSampler

FILL_FRACTION = 0.9
JAM_REJECTIONS = 200


@dataclass(frozen=True)
class OpticsConfig:
    """Beam, lens and sampling geometry.

    Defaults follow a 532 nm source expanded to a 4.8 mm spot with a
    250 mm collection lens; the derived speckle scale lambda*f3/D is
    27.7 um.
    """

    wavelength_um: float = 0.532
    focal_length_um: float = 250_000.0
    beam_diameter_um: float = 4_800.0
    object_samples: int = 4096
    object_extent_um: float = 8 * 4_800.0

    def __post_init__(self):
        if min(self.wavelength_um, self.focal_length_um, self.beam_diameter_um) <= 0:
            raise ValueError("wavelength, focal length and beam diameter must be positive")
        if self.object_extent_um < self.beam_diameter_um:
            raise ValueError("object extent must cover the beam diameter")
        n = self.object_samples
        if n < 2 or (n & (n - 1)) != 0:
            raise ValueError("object_samples must be a power of two")

    @property
    def object_pitch_um(self) -> float:
        return self.object_extent_um / self.object_samples

    @property
    def detector_pitch_um(self) -> float:
        return self.wavelength_um * self.focal_length_um / self.object_extent_um

    @property
    def speckle_scale_um(self) -> float:
        """Mean speckle grain, lambda * f3 / D."""
        return self.wavelength_um * self.focal_length_um / self.beam_diameter_um

    def object_grid_um(self) -> np.ndarray:
        n = self.object_samples
        return (np.arange(n) - n / 2) * self.object_pitch_um

    @classmethod
    def from_practical_units(cls, lambda_nm=532.0, f3_mm=250.0, D_mm=4.8,
                             object_samples=4096, extent_over_beam=8.0) -> "OpticsConfig":
        d_um = D_mm * 1e3
        return cls(
            wavelength_um=lambda_nm * 1e-3,
            focal_length_um=f3_mm * 1e3,
            beam_diameter_um=d_um,
            object_samples=object_samples,
            object_extent_um=extent_over_beam * d_um,
        )


@dataclass
class SurfaceRealization:
    """One random draw of particles plus the derived complex surface."""

    cfg: OpticsConfig
    positions_um: np.ndarray  # particle centers
    radii_um: np.ndarray  # half-widths
    mask: np.ndarray | None = None
    height_um: np.ndarray | None = None
    phase_field: np.ndarray | None = None  # unit-modulus complex w(x)

    @property
    def particles(self):
        return list(zip(self.positions_um, self.radii_um))


@dataclass(frozen=True)
class SpeckleFrame:
    """Detector intensity of a single exposure."""

    intensity: np.ndarray
    detector_pitch_um: float
    frame_index: int = 0


@dataclass(frozen=True)
class PhaseCorrelation:
    """Spatial autocorrelation of the surface phase field."""

    lag: np.ndarray  # in units of pitch_um per sample
    values: np.ndarray  # complex, values[0] == 1


def place_particles(psd: ParticleSizeDistribution, cfg: OpticsConfig, rng_seed) -> SurfaceRealization:
    """Rejection-place non-overlapping particles over the beam span.

    Candidate (radius, position) pairs are drawn i.i.d. (radius by inverse
    CDF from the PSD, position uniform on the span) and rejected when the
    interval [x - r, x + r] intersects an accepted one.  Placement stops
    at a fill fraction of 0.9 or after 200 consecutive rejections
    (jammed).  Centers stay within the span; edges may stick out.
    """
    rng = np.random.default_rng(rng_seed)
    span = cfg.beam_diameter_um
    sampler = RadiusSampler(psd)

    mean_diameter = 2.0 * psd.mean_radius_um()
    fits = int(span // mean_diameter) + 1  # centers may sit at the span edges
    if fits < 2:
        raise BeamTooSmallError(
            f"beam span {span} um fits under two particles of mean diameter {mean_diameter:.1f} um"
        )
    if fits < 10:
        warnings.warn(
            f"only ~{fits} particles of mean diameter {mean_diameter:.0f} um fit in the beam; "
            "ensemble statistics will be poor",
            stacklevel=2,
        )

    starts: list[float] = []  # sorted interval starts
    ends: list[float] = []  # ends, same order
    xs: list[float] = []
    rs: list[float] = []
    covered = 0.0
    rejections = 0
    while covered < FILL_FRACTION * span and rejections < JAM_REJECTIONS:
        r = float(sampler.draw(rng.random()))
        x = float(rng.uniform(-span / 2, span / 2))
        lo, hi = x - r, x + r
        i = bisect_left(starts, lo)
        clash = (i > 0 and ends[i - 1] > lo) or (i < len(starts) and starts[i] < hi)
        if clash:
            rejections += 1
            continue
        rejections = 0
        starts.insert(i, lo)
        ends.insert(i, hi)
        xs.append(x)
        rs.append(r)
        covered += 2 * r
    order = np.argsort(xs)
    return SurfaceRealization(
        cfg=cfg,
        positions_um=np.asarray(xs, dtype=float)[order],
        radii_um=np.asarray(rs, dtype=float)[order],
    )


def build_mask(real: SurfaceRealization, cfg: OpticsConfig | None = None) -> np.ndarray:
    """Binary amplitude mask: 1 where |x - x_i| <= r_i for some particle.

    r_i is the particle half-width (the boxcar runs over [-1, 1]).
    """
    cfg = cfg or real.cfg
    grid = cfg.object_grid_um()
    mask = np.zeros(cfg.object_samples)
    pitch = cfg.object_pitch_um
    x0 = grid[0]
    n = grid.size
    for x, r in zip(real.positions_um, real.radii_um):
        lo = int(np.ceil((x - r - x0) / pitch - 1e-12))
        hi = int(np.floor((x + r - x0) / pitch + 1e-12))
        if hi >= 0 and lo < n:
            mask[max(lo, 0) : min(hi, n - 1) + 1] = 1.0
    real.mask = mask
    return mask


def rough_heights(n_samples: int, rms_um: float, texture_samples: int, rng) -> np.ndarray:
    """Zero-mean rough height profile with the requested RMS.

    Per-sample Gaussian heights smoothed by a moving average of width
    texture_samples (the horizontal texture size, in samples), rescaled so
    the smoothed profile keeps the target RMS.
    """
    if texture_samples < 1:
        raise ValueError("texture_samples must be >= 1")
    raw = rng.standard_normal(n_samples)
    if texture_samples == 1:
        return rms_um * raw
    kernel = np.full(texture_samples, 1.0 / texture_samples)
    pad = texture_samples // 2
    padded = np.pad(raw, (pad, texture_samples - 1 - pad), mode="reflect")
    smooth = np.convolve(padded, kernel, mode="valid")
    # a width-t boxcar of unit-variance noise has std 1/sqrt(t)
    return rms_um * np.sqrt(texture_samples) * smooth


def rough_phase(
    real: SurfaceRealization,
    fluctuation_fraction: float,
    texture_samples: int,
    rng_seed,
) -> np.ndarray:
    """Build the surface height and its unit-modulus phase field.

    Height = box profile (each particle is a square bump of height equal
    to its size 2*r_i) plus roughness whose RMS is fluctuation_fraction
    times the particle size, horizontally smoothed over texture_samples.
    Background samples get roughness scaled by the mean particle size;
    they carry no amplitude so only the particles matter downstream.
    """
    if not (0.0 <= fluctuation_fraction <= 1.0):
        raise ValueError("fluctuation_fraction must lie in [0, 1]")
    cfg = real.cfg
    rng = np.random.default_rng(rng_seed)
    n = cfg.object_samples
    grid = cfg.object_grid_um()

    profile = np.zeros(n)
    scale = np.zeros(n)
    mean_size = 2.0 * float(np.mean(real.radii_um)) if real.radii_um.size else 0.0
    scale[:] = fluctuation_fraction * mean_size
    for x, r in zip(real.positions_um, real.radii_um):
        inside = np.abs(grid - x) <= r
        profile[inside] = 2.0 * r
        scale[inside] = fluctuation_fraction * 2.0 * r

    height = profile
    if fluctuation_fraction > 0.0 and real.radii_um.size:
        height = profile + scale * rough_heights(n, 1.0, texture_samples, rng)
    w = np.exp(2j * np.pi * height / cfg.wavelength_um)
    real.height_um = height
    real.phase_field = w
    return w


def propagate(real: SurfaceRealization, cfg: OpticsConfig | None = None,
              frame_index: int = 0, read_noise_rms: float = 0.0,
              rng_seed=None) -> SpeckleFrame:
    """Far-field intensity of the masked, phase-scrambled surface.

    The field is the discrete Fourier transform of S = mask * w on the
    conjugate grid (detector coordinate x = f * lambda * f3), scaled so
    that sum(I) * detector_pitch = sum(|S|^2) * object_pitch exactly.
    """
    cfg = cfg or real.cfg
    if real.mask is None:
        build_mask(real, cfg)
    if real.phase_field is None:
        raise ValueError("phase field not built; call rough_phase first")
    S = real.mask * real.phase_field
    E = np.fft.fft(S)
    scale = cfg.object_pitch_um / (cfg.object_samples * cfg.detector_pitch_um)
    intensity = np.fft.fftshift(np.abs(E) ** 2) * scale
    if read_noise_rms > 0.0:
        rng = np.random.default_rng(rng_seed)
        intensity = np.maximum(intensity + rng.normal(0.0, read_noise_rms, intensity.size), 0.0)
    return SpeckleFrame(intensity=intensity, detector_pitch_um=cfg.detector_pitch_um,
                        frame_index=frame_index)


def synthesize_surface(psd: ParticleSizeDistribution, cfg: OpticsConfig, rng_seed,
                       fluctuation_fraction: float = 0.01,
                       texture_samples: int = 1) -> SurfaceRealization:
    """place -> mask -> rough phase in one call."""
    real = place_particles(psd, cfg, rng_seed)
    build_mask(real, cfg)
    rough_phase(real, fluctuation_fraction, texture_samples,
                np.random.default_rng([_seed_int(rng_seed), 0x5EED]))
    return real


def simulate_frames(psd: ParticleSizeDistribution, cfg: OpticsConfig, n_frames: int,
                    rng_seed, fluctuation_fraction: float = 0.01,
                    texture_samples: int = 1, read_noise_rms: float = 0.0):
    """Yield independent speckle frames; frame i depends only on (seed, i).

    Each frame draws a fresh surface, so consecutive frames model an
    agitated sample with fully reshuffled particle positions.  Generation
    is pure per (seed, index) and safe to distribute across workers.
    """
    base = _seed_int(rng_seed)
    for i in range(n_frames):
        real = place_particles(psd, cfg, np.random.default_rng([base, i, 1]))
        build_mask(real, cfg)
        rough_phase(real, fluctuation_fraction, texture_samples,
                    np.random.default_rng([base, i, 2]))
        yield propagate(real, cfg, frame_index=i, read_noise_rms=read_noise_rms,
                        rng_seed=np.random.default_rng([base, i, 3]))


def _seed_int(rng_seed) -> int:
    if isinstance(rng_seed, (int, np.integer)):
        return int(rng_seed)
    return int(np.random.default_rng(rng_seed).integers(2**63))


def phase_correlation(w: np.ndarray, pitch_um: float = 1.0) -> PhaseCorrelation:
    """W(tau) = average over valid sigma of w(sigma) * conj(w(sigma + tau)).

    Computed with an FFT over the zero-padded field and normalized by the
    number of valid overlaps at each lag, so W(0) = 1 exactly for a
    unit-modulus field.
    """
    w = np.asarray(w, dtype=complex)
    n = w.size
    m = 1 << int(np.ceil(np.log2(2 * n)))
    F = np.fft.fft(w, m)
    corr = np.fft.ifft(np.abs(F) ** 2)[:n]
    counts = np.arange(n, 0, -1, dtype=float)
    values = np.conj(corr) / counts  # conj: corr sums w(sigma+tau) conj(w(sigma))
    # for |w| = 1 the zero-lag average is exactly 1; pin it against rounding
    values[0] = 1.0
    return PhaseCorrelation(lag=np.arange(n) * pitch_um, values=values)


# ---------------------------------------------------------------------------
# frame files: raw little-endian float32 + JSON header


def save_frame(frame: SpeckleFrame, cfg: OpticsConfig, path, seed=None) -> None:
    path = Path(path)
    frame.intensity.astype("<f4").tofile(path)
    header = {
        "n_samples": int(frame.intensity.size),
        "detector_pitch_um": frame.detector_pitch_um,
        "wavelength_nm": cfg.wavelength_um * 1e3,
        "f3_mm": cfg.focal_length_um * 1e-3,
        "D_mm": cfg.beam_diameter_um * 1e-3,
        "seed": seed,
        "frame_index": frame.frame_index,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=1))


def load_frame(path) -> tuple[SpeckleFrame, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path, dtype="<f4").astype(float)
    if data.size != header["n_samples"]:
        raise ValueError(f"{path}: expected {header['n_samples']} samples, found {data.size}")
    frame = SpeckleFrame(
        intensity=data,
        detector_pitch_um=header["detector_pitch_um"],
        frame_index=header.get("frame_index", 0),
    )
    return frame, header
