import numpy as np
import pytest

from speckle_psd.errors import BeamTooSmallError
from speckle_psd.psd import RadiusGrid, band_psd, delta_psd, make_psd
from speckle_psd.surface import (
    OpticsConfig,
    SurfaceRealization,
    build_mask,
    load_frame,
    phase_correlation,
    place_particles,
    propagate,
    rough_heights,
    rough_phase,
    save_frame,
    simulate_frames,
    synthesize_surface,
)

GRID = RadiusGrid()
CFG = OpticsConfig()


def manual_realization(positions, radii, cfg=CFG) -> SurfaceRealization:
    return SurfaceRealization(
        cfg=cfg,
        positions_um=np.asarray(positions, dtype=float),
        radii_um=np.asarray(radii, dtype=float),
    )


class TestOpticsConfig:
    def test_default_speckle_scale(self):
        assert abs(CFG.speckle_scale_um - 27.7083333) < 1e-6

    def test_extent_must_cover_beam(self):
        with pytest.raises(ValueError):
            OpticsConfig(object_extent_um=1000.0)

    def test_samples_power_of_two(self):
        with pytest.raises(ValueError):
            OpticsConfig(object_samples=3000)


class TestPlaceParticles:
    def test_giant_particle_fills_beam(self):
        grid = RadiusGrid(800, 2400, 3)  # 2400 um is a grid node
        psd = delta_psd(grid, 2400.0)
        cfg = OpticsConfig(object_extent_um=4.8e3 * 4)
        with pytest.warns(UserWarning):
            real = place_particles(psd, cfg, rng_seed=0)
        assert 1 <= real.radii_um.size <= 2

    def test_band_psd_expected_count(self):
        psd = band_psd(GRID, 106, 180)
        counts = []
        for seed in range(100):
            real = place_particles(psd, CFG, rng_seed=seed)
            counts.append(real.radii_um.size)
        # 0.9 * D / E[2r] ~ 15, jamming stops a little earlier
        assert abs(np.mean(counts) - 15.0) <= 5.0

    def test_fixed_seed_reproducible(self):
        psd = band_psd(GRID, 106, 180)
        a = place_particles(psd, CFG, rng_seed=123)
        b = place_particles(psd, CFG, rng_seed=123)
        assert np.array_equal(a.positions_um, b.positions_um)
        assert np.array_equal(a.radii_um, b.radii_um)

    def test_non_overlap_invariant(self):
        psd = band_psd(GRID, 106, 500)
        for seed in range(20):
            real = place_particles(psd, CFG, rng_seed=seed)
            lo = real.positions_um - real.radii_um
            hi = real.positions_um + real.radii_um
            order = np.argsort(lo)
            assert np.all(lo[order][1:] >= hi[order][:-1] - 1e-9)

    def test_centers_inside_beam_span(self):
        psd = band_psd(GRID, 106, 500)
        real = place_particles(psd, CFG, rng_seed=5)
        assert np.all(np.abs(real.positions_um) <= CFG.beam_diameter_um / 2)

    def test_beam_too_small_raises(self):
        grid = RadiusGrid(50, 8000, 64)
        psd = delta_psd(grid, 6000.0)
        with pytest.raises(BeamTooSmallError):
            place_particles(psd, OpticsConfig(object_extent_um=4.8e3 * 16), rng_seed=0)

    def test_few_particles_warns(self):
        grid = RadiusGrid(50, 4000, 128)
        psd = delta_psd(grid, 1000.0)
        with pytest.warns(UserWarning):
            place_particles(psd, CFG, rng_seed=0)


class TestBuildMask:
    def test_single_particle_on_unit_pitch(self):
        cfg = OpticsConfig(
            beam_diameter_um=2048.0, object_extent_um=4096.0, object_samples=4096
        )
        real = manual_realization([0.0], [100.0], cfg)
        mask = build_mask(real, cfg)
        assert mask.sum() == 201  # 1 um pitch, inclusive edges
        grid = cfg.object_grid_um()
        assert np.array_equal(np.flatnonzero(mask), np.flatnonzero(np.abs(grid) <= 100.0))

    def test_empty_realization_zero_mask(self):
        real = manual_realization([], [])
        assert build_mask(real, CFG).sum() == 0

    def test_two_disjoint_particles_match_predicate_oracle(self):
        real = manual_realization([-500.0, 700.0], [120.0, 60.0])
        mask = build_mask(real, CFG)
        grid = CFG.object_grid_um()
        oracle = ((np.abs(grid + 500.0) <= 120.0) | (np.abs(grid - 700.0) <= 60.0)).astype(float)
        assert np.array_equal(mask, oracle)
        assert mask.max() == 1.0


class TestRoughPhase:
    def test_zero_fluctuation_constant_phase_per_particle(self):
        real = manual_realization([-500.0, 700.0], [120.0, 60.0])
        build_mask(real, CFG)
        w = rough_phase(real, 0.0, 1, rng_seed=0)
        grid = CFG.object_grid_um()
        inside = np.abs(grid + 500.0) <= 120.0
        assert np.allclose(w[inside], w[inside][0])
        assert np.allclose(np.abs(w), 1.0, atol=1e-12)

    def test_rms_height_masses_paper_example(self):
        # a 150 um particle at 1% fluctuation carries 1.5 um RMS roughness
        rng = np.random.default_rng(11)
        h = rough_heights(200_000, 1.5, 1, rng)
        assert abs(np.std(h) - 1.5) / 1.5 < 0.02

    def test_phase_rms_is_many_radians(self):
        # 1% of a 150 um particle at 532 nm is ~17.7 rad of phase
        real = manual_realization([0.0], [75.0])
        build_mask(real, CFG)
        rough_phase(real, 0.01, 1, rng_seed=2)
        grid = CFG.object_grid_um()
        inside = np.abs(grid) <= 75.0
        phase_rms = np.std(2 * np.pi * real.height_um[inside] / CFG.wavelength_um)
        assert phase_rms > 2 * np.pi  # fully developed speckle regime
        assert abs(phase_rms - 2 * np.pi * 1.5 / 0.532) / (2 * np.pi * 1.5 / 0.532) < 0.35

    def test_unit_modulus_everywhere(self):
        real = synthesize_surface(band_psd(GRID, 106, 500), CFG, rng_seed=3)
        assert np.max(np.abs(np.abs(real.phase_field) - 1.0)) < 1e-12

    def test_texture_smoothing_correlates_neighbors(self):
        rng = np.random.default_rng(4)
        h = rough_heights(100_000, 1.0, 8, rng)
        r1 = np.corrcoef(h[:-1], h[1:])[0, 1]
        assert r1 > 0.8  # width-8 boxcar leaves ~7/8 shared samples


class TestPropagate:
    def test_full_aperture_is_sinc_like_peak(self):
        # mask over the whole beam with flat phase: diffraction of a slit
        cfg = CFG
        real = manual_realization([0.0], [cfg.beam_diameter_um / 2], cfg)
        build_mask(real, cfg)
        rough_phase(real, 0.0, 1, rng_seed=0)
        frame = propagate(real, cfg)
        n = cfg.object_samples
        center = int(np.argmax(frame.intensity))
        assert abs(center - n // 2) <= 1
        # first zero of the slit pattern at lambda f3 / D_slit
        x = (np.arange(n) - n / 2) * frame.detector_pitch_um
        slit_width = cfg.beam_diameter_um + cfg.object_pitch_um  # inclusive mask edges
        zero_x = cfg.wavelength_um * cfg.focal_length_um / slit_width
        k = int(np.argmin(np.abs(x - zero_x)))
        assert frame.intensity[k] < 1e-3 * frame.intensity[center]

    def test_parseval_energy_conservation(self):
        real = synthesize_surface(band_psd(GRID, 106, 500), CFG, rng_seed=7)
        frame = propagate(real, CFG)
        lhs = frame.intensity.sum() * frame.detector_pitch_um
        S = real.mask * real.phase_field
        rhs = np.sum(np.abs(S) ** 2) * CFG.object_pitch_um
        assert abs(lhs - rhs) / rhs < 1e-9

    def test_mean_speckle_grain_near_scale(self):
        # autocovariance width of single-frame intensity ~ lambda f3 / D
        psd = band_psd(GRID, 106, 180)
        frame = next(simulate_frames(psd, CFG, 1, rng_seed=21))
        I = frame.intensity - frame.intensity.mean()
        ac = np.fft.irfft(np.abs(np.fft.rfft(I)) ** 2, n=I.size)
        ac /= ac[0]
        # full width at half maximum of the covariance in detector units
        k = int(np.argmax(ac < 0.5))
        grain_fwhm = 2 * k * frame.detector_pitch_um
        assert 0.5 * CFG.speckle_scale_um < grain_fwhm < 2.0 * CFG.speckle_scale_um


class TestPhaseCorrelation:
    def test_flat_phase_gives_unit_correlation(self):
        w = np.ones(512, dtype=complex)
        pc = phase_correlation(w)
        assert np.allclose(pc.values, 1.0)

    def test_fft_route_matches_direct_double_loop(self):
        rng = np.random.default_rng(9)
        w = np.exp(1j * rng.uniform(0, 2 * np.pi, 128))
        pc = phase_correlation(w)
        for tau in (0, 1, 5, 31, 127):
            direct = np.mean(w[: 128 - tau] * np.conj(w[tau:])) if tau else 1.0
            assert abs(pc.values[tau] - direct) < 1e-9

    def test_rough_surface_decorrelates_within_one_sample(self):
        # lags past n/2 average over too few samples to mean anything
        rng = np.random.default_rng(10)
        n = 8192
        for fluct, texture in [(0.01, 1), (0.05, 4), (0.10, 8)]:
            h = rough_heights(n, fluct * 150.0, texture, rng)
            w = np.exp(2j * np.pi * h / 0.532)
            pc = phase_correlation(w)
            assert np.max(np.abs(pc.values[1 : n // 2])) < 0.1


class TestFrameIO:
    def test_round_trip(self, tmp_path):
        psd = band_psd(GRID, 106, 500)
        frame = next(simulate_frames(psd, CFG, 1, rng_seed=12))
        path = tmp_path / "frame_000000.f32"
        save_frame(frame, CFG, path, seed=12)
        again, header = load_frame(path)
        assert np.allclose(again.intensity, frame.intensity, rtol=1e-6)
        assert header["wavelength_nm"] == 532.0
        assert header["D_mm"] == 4.8

    def test_simulate_frames_deterministic(self):
        psd = band_psd(GRID, 106, 500)
        a = [f.intensity for f in simulate_frames(psd, CFG, 3, rng_seed=5)]
        b = [f.intensity for f in simulate_frames(psd, CFG, 3, rng_seed=5)]
        for x, y in zip(a, b):
            assert np.array_equal(x, y)
        c = [f.intensity for f in simulate_frames(psd, CFG, 3, rng_seed=6)]
        assert not np.array_equal(a[0], c[0])
