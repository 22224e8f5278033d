import numpy as np
import pytest

from speckle_psd.autocorr import AutocorrProfile
from speckle_psd.correction import (
    CalibrationPair,
    CorrectionModel,
    apply_correction,
    fit_correction,
    loss_and_gradients,
    npcc,
)
from speckle_psd.errors import GridMismatchError, UnnormalizedInputError, ZeroVarianceError
from speckle_psd.forward import ForwardConfig, default_u_grid, envelope_zero, forward
from speckle_psd.psd import RadiusGrid, delta_psd
from speckle_psd.surface import OpticsConfig


def profile_of(values):
    values = np.asarray(values, dtype=float)
    return AutocorrProfile(np.arange(values.size, dtype=float), values)


def lobed_profiles(n_pairs, true_model, seed=1):
    rng = np.random.default_rng(seed)
    x = np.linspace(0, 6 * np.pi, 96)
    pairs = []
    for _ in range(n_pairs):
        r = rng.uniform(0.5, 3.0)
        g = (np.sin(r * x) / (r * x + 1e-9)) ** 2
        calc = profile_of(g / g.max())
        meas = apply_correction(true_model, calc)
        pairs.append(CalibrationPair(calc, meas))
    return pairs


TRUE_MODEL = CorrectionModel(
    kernel=np.exp(-0.5 * ((np.arange(9) - 4) / 2.0) ** 2) / np.exp(-0.5 * ((np.arange(9) - 4) / 2.0) ** 2).sum(),
    alpha=0.8,
    beta=-0.3,
)


class TestApply:
    def test_degenerate_parameters_pure_squash(self):
        g = np.linspace(0, 1, 64)
        model = CorrectionModel(alpha=0.0, beta=-4.0)
        out = apply_correction(model, profile_of(g))
        assert np.allclose(out.values, 1 / (1 + np.exp(-(g - 4.0))), rtol=1e-12)

    def test_output_strictly_inside_unit_interval(self):
        out = apply_correction(TRUE_MODEL, profile_of(np.linspace(0, 1, 64)))
        assert np.all(out.values > 0.0) and np.all(out.values < 1.0)

    def test_noise_deterministic_per_seed(self):
        model = CorrectionModel(noise_amplitude=0.05)
        g = profile_of(np.linspace(0, 1, 64))
        a = apply_correction(model, g, rng_seed=3)
        b = apply_correction(model, g, rng_seed=3)
        c = apply_correction(model, g, rng_seed=4)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_two_seeds_stay_strongly_correlated(self):
        model = CorrectionModel(noise_amplitude=0.05)
        x = np.linspace(0, 6 * np.pi, 96)
        g = profile_of(((np.sin(x) / (x + 1e-9)) ** 2))
        a = apply_correction(model, g, rng_seed=1)
        b = apply_correction(model, g, rng_seed=2)
        assert npcc(a, b) < -0.99

    def test_unnormalized_input_rejected(self):
        with pytest.raises(UnnormalizedInputError):
            apply_correction(TRUE_MODEL, profile_of([0.0, 2.0]))

    def test_kernel_must_be_odd(self):
        with pytest.raises(ValueError):
            CorrectionModel(kernel=np.ones(4) / 4)

    def test_parameter_budget(self):
        with pytest.raises(ValueError):
            CorrectionModel(kernel=np.ones(51) / 51)


class TestNpcc:
    def test_self_correlation(self):
        a = profile_of(np.sin(np.linspace(0, 7, 64)))
        assert npcc(a, a) == pytest.approx(-1.0)

    def test_anticorrelation(self):
        a = profile_of(np.sin(np.linspace(0, 7, 64)))
        b = profile_of(-a.values + 5.0)
        assert npcc(a, b) == pytest.approx(1.0)

    def test_affine_invariance(self):
        a = profile_of(np.sin(np.linspace(0, 7, 64)))
        b = profile_of(2.0 * a.values + 3.0)
        assert npcc(a, b) == pytest.approx(-1.0)

    def test_zero_variance_rejected(self):
        with pytest.raises(ZeroVarianceError):
            npcc(profile_of([1.0, 1.0]), profile_of([1.0, 2.0]))

    def test_grid_mismatch_rejected(self):
        a = profile_of([0.0, 1.0, 0.5])
        b = AutocorrProfile(np.array([0.0, 2.0, 4.0]), np.array([0.0, 1.0, 0.5]))
        with pytest.raises(GridMismatchError):
            npcc(a, b)


class TestGradients:
    def test_analytic_matches_central_differences(self):
        pairs = lobed_profiles(5, TRUE_MODEL, seed=2)
        model = CorrectionModel()
        loss, g_k, g_a, g_b = loss_and_gradients(model, pairs)
        eps = 1e-6

        def loss_at(kernel, alpha, beta):
            return loss_and_gradients(
                CorrectionModel(kernel, alpha, beta), pairs
            )[0]

        worst = 0.0
        for j in range(model.kernel.size):
            kp = model.kernel.copy()
            km = model.kernel.copy()
            kp[j] += eps
            km[j] -= eps
            fd = (loss_at(kp, model.alpha, model.beta) - loss_at(km, model.alpha, model.beta)) / (2 * eps)
            worst = max(worst, abs(fd - g_k[j]) / max(abs(fd), 1e-12))
        fd = (loss_at(model.kernel, model.alpha + eps, model.beta)
              - loss_at(model.kernel, model.alpha - eps, model.beta)) / (2 * eps)
        worst = max(worst, abs(fd - g_a) / max(abs(fd), 1e-12))
        fd = (loss_at(model.kernel, model.alpha, model.beta + eps)
              - loss_at(model.kernel, model.alpha, model.beta - eps)) / (2 * eps)
        worst = max(worst, abs(fd - g_b) / max(abs(fd), 1e-12))
        assert worst < 1e-5


class TestFit:
    def test_recovers_self_generated_pairs(self):
        pairs = lobed_profiles(10, TRUE_MODEL, seed=3)
        model, loss = fit_correction(pairs, epochs=1500)
        assert loss <= -0.995
        for pair in pairs:
            out = apply_correction(model, pair.calculated)
            assert npcc(out, pair.measured) <= -0.995

    def test_single_repeated_pair_overfits(self):
        pair = lobed_profiles(1, TRUE_MODEL, seed=4)[0]
        model, loss = fit_correction([pair] * 4, epochs=2500)
        assert loss <= -0.999

    def test_zero_learning_rate_keeps_parameters(self):
        pairs = lobed_profiles(4, TRUE_MODEL, seed=5)
        init = CorrectionModel()
        model, _ = fit_correction(pairs, epochs=50, lr=0.0, init=init)
        assert np.array_equal(model.kernel, init.kernel)
        assert model.alpha == init.alpha and model.beta == init.beta

    def test_identity_seeking_fit_shrinks_alpha(self):
        rng = np.random.default_rng(6)
        x = np.linspace(0, 6 * np.pi, 96)
        pairs = []
        for _ in range(6):
            r = rng.uniform(0.5, 3.0)
            g = (np.sin(r * x) / (r * x + 1e-9)) ** 2
            calc = profile_of(g / g.max())
            meas = profile_of(1 / (1 + np.exp(-calc.values)))
            pairs.append(CalibrationPair(calc, meas))
        model, loss = fit_correction(pairs, epochs=4000)
        assert abs(model.alpha) < 0.05
        assert loss <= -0.999

    def test_requires_four_pairs(self):
        with pytest.raises(ValueError):
            fit_correction(lobed_profiles(2, TRUE_MODEL), epochs=10)


class TestMultilayerDamping:
    def test_wide_blur_suppresses_high_order_lobes(self):
        cfg = OpticsConfig()
        u = default_u_grid(cfg, samples_per_lobe=16)
        prof = forward(delta_psd(RadiusGrid(), 150.0), ForwardConfig(cfg, u))
        wide = CorrectionModel(kernel=np.ones(33) / 33, alpha=2.0, beta=0.0)
        out = apply_correction(wide, prof)
        D = cfg.beam_diameter_um

        def contrast(values, lobe):
            sel = (u > envelope_zero(lobe, D)) & (u < envelope_zero(lobe + 1, D))
            return values[sel].max() - values[sel].min()

        before = contrast(prof.values, 4) / contrast(prof.values, 1)
        after = contrast(out.values, 4) / contrast(out.values, 1)
        assert after < before


class TestSerialization:
    def test_json_round_trip(self, tmp_path):
        path = tmp_path / "model.json"
        TRUE_MODEL.save(path)
        again = CorrectionModel.load(path)
        assert np.allclose(again.kernel, TRUE_MODEL.kernel, rtol=1e-12)
        assert again.alpha == TRUE_MODEL.alpha
        assert again.beta == TRUE_MODEL.beta
