"""Parametric correction from calculated to realistic averaged profiles.

Multilayer scattering, finite integration and finite-frame averaging all
push a measured average away from the clean closed form, mostly by
damping high-order lobes.  A small blur-and-squash map absorbs that:

    out = logistic(g + alpha * blur(softplus(g)) + beta + noise)

with an odd smoothing kernel, scalar gain and bias (about a dozen
parameters in total), trained on calculated/measured pairs with the
negative Pearson correlation loss.  Gradients are analytic; fitting is
plain full-batch gradient descent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autocorr import AutocorrProfile
from .errors import (
    DivergedLossError,
    GridMismatchError,
    UnnormalizedInputError,
    ZeroVarianceError,
)

DEFAULT_KERNEL_TAPS = 9
MAX_PARAMETERS = 50


def _triangle_kernel(taps: int) -> np.ndarray:
    k = np.bartlett(taps + 2)[1:-1]
    return k / k.sum()


@dataclass(frozen=True)
class CorrectionModel:
    """Blur kernel + gain + bias, with optional input noise injection."""

    kernel: np.ndarray = field(default_factory=lambda: _triangle_kernel(DEFAULT_KERNEL_TAPS))
    alpha: float = 0.1
    beta: float = 0.0
    noise_amplitude: float = 0.0

    def __post_init__(self):
        k = np.ascontiguousarray(self.kernel, dtype=float)
        if k.size % 2 != 1:
            raise ValueError("kernel length must be odd")
        if k.size + 2 > MAX_PARAMETERS:
            raise ValueError(f"parameter count capped at {MAX_PARAMETERS}")
        if self.noise_amplitude < 0:
            raise ValueError("noise amplitude must be nonnegative")
        k.flags.writeable = False
        object.__setattr__(self, "kernel", k)

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "kernel": list(self.kernel),
                    "alpha": self.alpha,
                    "beta": self.beta,
                    "noise_amplitude": self.noise_amplitude,
                    "inner": "softplus",
                },
                indent=1,
            )
        )

    @classmethod
    def load(cls, path) -> "CorrectionModel":
        d = json.loads(Path(path).read_text())
        if d.get("inner", "softplus") != "softplus":
            raise ValueError(f"unsupported inner nonlinearity {d.get('inner')!r}")
        return cls(
            kernel=np.array(d["kernel"], dtype=float),
            alpha=float(d["alpha"]),
            beta=float(d["beta"]),
            noise_amplitude=float(d.get("noise_amplitude", 0.0)),
        )


@dataclass(frozen=True)
class CalibrationPair:
    calculated: AutocorrProfile
    measured: AutocorrProfile

    def __post_init__(self):
        if not self.calculated.same_grid(self.measured):
            raise GridMismatchError("calibration pair profiles live on different grids")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    pad = kernel.size // 2
    return np.convolve(np.pad(x, pad, mode="edge"), kernel, mode="valid")


def apply_correction(model: CorrectionModel, g_calc: AutocorrProfile, rng_seed=None) -> AutocorrProfile:
    """Map a normalized calculated profile toward a realistic one.

    Noise, when enabled, is additive uniform [0, 1) * noise_amplitude at
    the input, mimicking the residual fluctuation of finite averaging.
    Deterministic for a fixed seed.
    """
    g = g_calc.values
    if g.min() < -1e-9 or g.max() > 1.0 + 1e-9:
        raise UnnormalizedInputError("correction input must be normalized to [0, 1]")
    if model.noise_amplitude > 0.0:
        rng = np.random.default_rng(rng_seed)
        g = g + model.noise_amplitude * rng.random(g.size)
    z = g + model.alpha * _blur(_softplus(g), model.kernel) + model.beta
    return AutocorrProfile(g_calc.u_per_um, _logistic(z), frames_averaged=g_calc.frames_averaged)


def npcc(a: AutocorrProfile, b: AutocorrProfile) -> float:
    """Negative Pearson correlation of two profiles; -1 is a perfect match."""
    if not a.same_grid(b):
        raise GridMismatchError("profiles live on different u grids")
    return npcc_values(a.values, b.values)


def npcc_values(x: np.ndarray, y: np.ndarray) -> float:
    x0 = x - x.mean()
    y0 = y - y.mean()
    sxx = float(np.dot(x0, x0))
    syy = float(np.dot(y0, y0))
    if sxx <= 0.0 or syy <= 0.0:
        raise ZeroVarianceError("Pearson correlation needs nonconstant inputs")
    return -float(np.dot(x0, y0)) / np.sqrt(sxx * syy)


def loss_and_gradients(model: CorrectionModel, pairs) -> tuple[float, np.ndarray, float, float]:
    """Mean NPCC over pairs and its analytic gradients.

    Returns (loss, d/dkernel, d/dalpha, d/dbeta).  The noise injection is
    omitted here: the trainable map is the deterministic part.
    """
    taps = model.kernel.size
    pad = taps // 2
    g_k = np.zeros(taps)
    g_a = 0.0
    g_b = 0.0
    total = 0.0
    for pair in pairs:
        g = pair.calculated.values
        y = pair.measured.values
        s = _softplus(g)
        bs = _blur(s, model.kernel)
        yh = _logistic(g + model.alpha * bs + model.beta)

        a0 = yh - yh.mean()
        b0 = y - y.mean()
        saa = float(np.dot(a0, a0))
        sbb = float(np.dot(b0, b0))
        if saa <= 0.0 or sbb <= 0.0:
            raise ZeroVarianceError("constant profile in calibration pair")
        sab = float(np.dot(a0, b0))
        rho = sab / np.sqrt(saa * sbb)
        total += -rho

        d_yh = -(b0 / np.sqrt(saa * sbb) - rho * a0 / saa)
        d_z = d_yh * yh * (1.0 - yh)
        g_a += float(np.dot(d_z, bs))
        g_b += float(d_z.sum())
        sp = np.pad(s, pad, mode="edge")
        for j in range(taps):
            # blur via np.convolve flips the kernel: tap j sees sp shifted by taps-1-j
            g_k[j] += model.alpha * float(np.dot(d_z, sp[taps - 1 - j : taps - 1 - j + g.size]))
    n = len(pairs)
    return total / n, g_k / n, g_a / n, g_b / n


def fit_correction(pairs, epochs: int = 400, lr: float = 1e-2,
                   init: CorrectionModel | None = None) -> tuple[CorrectionModel, float]:
    """Full-batch gradient descent on the mean NPCC loss.

    Starts from the documented initialization (normalized triangle kernel,
    alpha 0.1, beta 0) unless an explicit model is given; returns the
    fitted model and its final training loss.  Raises DivergedLossError if
    the final loss exceeds the initial one.
    """
    pairs = list(pairs)
    if len(pairs) < 4:
        raise ValueError("need at least four calibration pairs (repeats are fine)")
    model = init if init is not None else CorrectionModel()
    kernel = model.kernel.copy()
    alpha = model.alpha
    beta = model.beta
    first = None
    loss = np.inf
    for _ in range(epochs):
        loss, g_k, g_a, g_b = loss_and_gradients(
            CorrectionModel(kernel, alpha, beta, model.noise_amplitude), pairs
        )
        if first is None:
            first = loss
        if lr == 0.0:
            break
        kernel = kernel - lr * g_k
        alpha -= lr * g_a
        beta -= lr * g_b
    fitted = CorrectionModel(kernel, alpha, beta, model.noise_amplitude)
    final, _, _, _ = loss_and_gradients(fitted, pairs)
    if first is not None and final > first + 1e-12:
        raise DivergedLossError(f"loss rose from {first:.6f} to {final:.6f}")
    return fitted, final
