"""Spatial-integral autocorrelation of speckle frames and ensemble averaging.

The autocorrelation A(u') = integral I(x) I(x + u') dx is evaluated on the
circular lag grid of the frame via the Wiener-Khinchin route and reported
against the reduced spatial frequency u = 2*pi*u'/(lambda*f3), which is
conjugate to the object coordinate.  Profiles keep the nonnegative-u half;
the full profile is symmetric for real frames.

Averaging is streaming: partial means carry their frame counts and merge
associatively, so ensembles can be accumulated out of order or in parallel.
"""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AllZeroError,
    CenterOutOfBoundsError,
    FrameTooLargeError,
    GridMismatchError,
    InsufficientFramesError,
)
from .surface import OpticsConfig, SpeckleFrame

DIRECT_ORACLE_MAX = 16384


@dataclass(frozen=True)
class AutocorrProfile:
    """Autocorrelation samples on a nonnegative spatial-frequency grid."""

    u_per_um: np.ndarray
    values: np.ndarray
    frames_averaged: int = 1

    def __post_init__(self):
        u = np.ascontiguousarray(self.u_per_um, dtype=float)
        v = np.ascontiguousarray(self.values, dtype=float)
        if u.shape != v.shape:
            raise ValueError("u grid and values must have the same length")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u_per_um", u)
        object.__setattr__(self, "values", v)

    def same_grid(self, other: "AutocorrProfile", tol: float = 1e-9) -> bool:
        return self.u_per_um.shape == other.u_per_um.shape and np.allclose(
            self.u_per_um, other.u_per_um, rtol=0, atol=tol
        )


@dataclass(frozen=True)
class AveragingPlan:
    """Sliding-window ensemble averaging: window frames every step frames."""

    window: int = 200
    step: int = 40

    def __post_init__(self):
        if self.window < 1 or not (1 <= self.step <= self.window):
            raise ValueError("require window >= 1 and 1 <= step <= window")


def _raw_circular_autocorr(intensity: np.ndarray, pitch: float) -> np.ndarray:
    spec = np.abs(np.fft.rfft(intensity)) ** 2
    return np.fft.irfft(spec, n=intensity.size) * pitch


def autocorrelate(frame: SpeckleFrame, cfg: OpticsConfig,
                  subtract_background: bool = False) -> AutocorrProfile:
    """Wiener-Khinchin autocorrelation of one frame.

    With subtract_background=True the flat incoherent background of a
    fully rough, unit-reflectivity surface is removed: both the mean
    intensity pedestal and the single-sample decorrelation floor, whose
    closed form is (e^2 - e) in mask-sample units with e the frame energy.
    What remains estimates the squared Fourier magnitude of the amplitude
    mask alone, which is the quantity the analytic forward operator
    predicts.
    """
    I = frame.intensity
    n = I.size
    pitch = frame.detector_pitch_um
    A = _raw_circular_autocorr(I, pitch)
    if subtract_background:
        object_pitch = cfg.wavelength_um * cfg.focal_length_um / (n * pitch)
        c2 = object_pitch / (n * pitch)  # intensity scale per DFT count
        e = float(I.sum()) * pitch / object_pitch  # = sum |S|^2 of the source frame
        floor = pitch * c2 * c2 * n * (e * e - e)
        A = A - floor
    half = n // 2 + 1
    u = 2.0 * np.pi * np.arange(half) * pitch / (cfg.wavelength_um * cfg.focal_length_um)
    return AutocorrProfile(u_per_um=u, values=A[:half], frames_averaged=1)


def autocorrelate_direct(frame: SpeckleFrame, cfg: OpticsConfig | None = None) -> AutocorrProfile:
    """Literal discretized sum A[k] = sum_x I[x] I[x+k] dx, periodic indexing.

    O(N^2) oracle for the FFT route; frames above 16384 samples are refused.
    """
    I = frame.intensity
    n = I.size
    if n > DIRECT_ORACLE_MAX:
        raise FrameTooLargeError(f"direct oracle capped at {DIRECT_ORACLE_MAX} samples, got {n}")
    pitch = frame.detector_pitch_um
    half = n // 2 + 1
    A = np.empty(half)
    for k in range(half):
        A[k] = float(np.dot(I, np.roll(I, -k))) * pitch
    if cfg is not None:
        u = 2.0 * np.pi * np.arange(half) * pitch / (cfg.wavelength_um * cfg.focal_length_um)
    else:
        u = np.arange(half) * pitch
    return AutocorrProfile(u_per_um=u, values=A, frames_averaged=1)


class ProfileAccumulator:
    """Streaming mean of profiles; constant memory, associative merge."""

    def __init__(self):
        self._sum: np.ndarray | None = None
        self._u: np.ndarray | None = None
        self._frames = 0

    def push(self, profile: AutocorrProfile) -> None:
        if self._sum is None:
            self._u = profile.u_per_um
            self._sum = profile.values * profile.frames_averaged
        else:
            if profile.u_per_um.shape != self._u.shape or not np.allclose(
                profile.u_per_um, self._u, rtol=0, atol=1e-9
            ):
                raise GridMismatchError("profile u grid differs from accumulated grid")
            self._sum = self._sum + profile.values * profile.frames_averaged
        self._frames += profile.frames_averaged

    def merge(self, other: "ProfileAccumulator") -> "ProfileAccumulator":
        if other._sum is None:
            return self
        if self._sum is None:
            return other
        if not np.allclose(self._u, other._u, rtol=0, atol=1e-9):
            raise GridMismatchError("cannot merge accumulators on different grids")
        out = ProfileAccumulator()
        out._u = self._u
        out._sum = self._sum + other._sum
        out._frames = self._frames + other._frames
        return out

    @property
    def frames(self) -> int:
        return self._frames

    def result(self) -> AutocorrProfile:
        if self._sum is None:
            raise InsufficientFramesError("no profiles accumulated")
        return AutocorrProfile(self._u, self._sum / self._frames, frames_averaged=self._frames)


def ensemble_average(profiles) -> AutocorrProfile:
    """Pointwise mean over a stream of profiles sharing one u grid."""
    acc = ProfileAccumulator()
    for p in profiles:
        acc.push(p)
    return acc.result()


def sliding_windows(profiles, plan: AveragingPlan):
    """Emit the mean of every complete window of the ordered profile stream.

    Window starts are 0, step, 2*step, ...; a run of F profiles yields
    floor((F - window)/step) + 1 averages.  (1000 frames with the default
    window 200 / step 40 gives 21.)
    """
    buf: deque = deque()
    emitted = 0
    for p in profiles:
        buf.append(p)
        if len(buf) == plan.window:
            acc = ProfileAccumulator()
            for q in buf:
                acc.push(q)
            yield acc.result()
            emitted += 1
            for _ in range(plan.step):
                buf.popleft()
    if emitted == 0:
        raise InsufficientFramesError(f"need at least {plan.window} frames for one window")


def radial_profile(image: np.ndarray, center) -> AutocorrProfile:
    """Reduce a 2D map to annulus means of 1-pixel width around center."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("expected a 2D image")
    cy, cx = float(center[0]), float(center[1])
    h, w = image.shape
    if not (0 <= cy <= h - 1 and 0 <= cx <= w - 1):
        raise CenterOutOfBoundsError(f"center {center} outside {h}x{w} image")
    yy, xx = np.indices(image.shape)
    rho = np.hypot(yy - cy, xx - cx)
    ring = np.rint(rho).astype(int)
    n_bins = int(ring.max()) + 1
    sums = np.bincount(ring.ravel(), weights=image.ravel(), minlength=n_bins)
    counts = np.bincount(ring.ravel(), minlength=n_bins)
    return AutocorrProfile(
        u_per_um=np.arange(n_bins, dtype=float),
        values=sums / counts,
        frames_averaged=1,
    )


def normalize_profile(p: AutocorrProfile, eighth_root: bool = False) -> AutocorrProfile:
    """Scale by the zero-lag value; optionally apply the x^(1/8) display map."""
    scale = p.values[0]
    if scale <= 0:
        raise AllZeroError("zero-lag value is not positive")
    v = p.values / scale
    if eighth_root:
        v = np.clip(v, 0.0, None) ** 0.125
    return AutocorrProfile(p.u_per_um, v, frames_averaged=p.frames_averaged)


# ---------------------------------------------------------------------------
# serialization


def save_profile(p: AutocorrProfile, path, cfg: OpticsConfig | None = None,
                 normalized: bool = False) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["u_per_um", "value"])
        for u, v in zip(p.u_per_um, p.values):
            writer.writerow([f"{u:.12g}", f"{v:.12g}"])
    meta = {"frames_averaged": p.frames_averaged, "normalized": normalized}
    if cfg is not None:
        meta.update(
            lambda_nm=cfg.wavelength_um * 1e3,
            f3_mm=cfg.focal_length_um * 1e-3,
            D_mm=cfg.beam_diameter_um * 1e-3,
        )
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def load_profile(path) -> AutocorrProfile:
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".json")
    frames = 1
    if meta_path.exists():
        frames = int(json.loads(meta_path.read_text()).get("frames_averaged", 1))
    us, vs = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["u_per_um", "value"]:
            raise ValueError(f"unexpected CSV header {header!r}")
        for row in reader:
            us.append(float(row[0]))
            vs.append(float(row[1]))
    return AutocorrProfile(np.array(us), np.array(vs), frames_averaged=frames)


def save_image(image: np.ndarray, path) -> None:
    """Raw little-endian float32 image with a JSON {width, height} header."""
    path = Path(path)
    image = np.asarray(image, dtype="<f4")
    image.tofile(path)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps({"width": image.shape[1], "height": image.shape[0]})
    )


def load_image(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path, dtype="<f4").astype(float)
    return data.reshape(meta["height"], meta["width"])
