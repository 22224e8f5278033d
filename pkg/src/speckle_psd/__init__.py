"""Self-verifying toolkit for particle sizing from laser speckle.

Simulates speckle from random 1D particle surfaces, computes ensemble
averaged spatial-integral autocorrelations, evaluates the closed-form
map from a size distribution to that average, and inverts it under a
monotone-cumulative constraint.
"""

__version__ = "0.1.0"

from .autocorr import (
    AutocorrProfile,
    AveragingPlan,
    ProfileAccumulator,
    autocorrelate,
    autocorrelate_direct,
    ensemble_average,
    normalize_profile,
    radial_profile,
    sliding_windows,
)
from .correction import (
    CalibrationPair,
    CorrectionModel,
    apply_correction,
    fit_correction,
    npcc,
)
from .errors import SpecklePSDError
from .forward import (
    ForwardConfig,
    default_u_grid,
    envelope,
    envelope_zero,
    forward,
    lobe_band,
    position_average_factor,
    size_kernel,
    stochastic_forward,
    stochastic_forward_mean,
    tune_range,
)
from .inverse import (
    EstimateResult,
    EstimatorConfig,
    SyntheticDataset,
    estimate,
    evaluate,
    isotonic_projection,
    make_synthetic_dataset,
    timelapse,
)
from .psd import (
    CumulativeDistribution,
    ParticleSizeDistribution,
    RadiusGrid,
    band_psd,
    cumulative_of,
    delta_psd,
    empirical_cumulative,
    gaussian_psd,
    make_psd,
    psd_of_cumulative,
    sample_radii,
    wasserstein_1d,
)
from .surface import (
    OpticsConfig,
    PhaseCorrelation,
    SpeckleFrame,
    SurfaceRealization,
    build_mask,
    phase_correlation,
    place_particles,
    propagate,
    rough_heights,
    rough_phase,
    simulate_frames,
    synthesize_surface,
)

__all__ = [name for name in dir() if not name.startswith("_")]
