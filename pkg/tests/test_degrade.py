import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deblur_mim import degrade as D

from oracles import brute_convolve2d, gaussian_weights, srad_step_loops


class TestKernels:
    def test_gaussian_unit_sigma_values(self):
        # exp(-1/2), exp(-1) against 1, normalized over the 3x3 support
        e1, e2 = np.exp(-0.5), np.exp(-1.0)
        z = 1 + 4 * e1 + 4 * e2
        k = D.gaussian_kernel(1.0, radius=1)
        assert k[1, 1] == pytest.approx(1 / z, abs=1e-12)
        assert k[0, 1] == pytest.approx(e1 / z, abs=1e-12)
        assert k[0, 0] == pytest.approx(e2 / z, abs=1e-12)
        assert k[1, 1] == pytest.approx(0.20418, abs=5e-6)

    def test_default_radius_is_three_sigma(self):
        assert D.gaussian_kernel(1.1).shape == (9, 9)
        assert D.gaussian_kernel(0.8).shape == (7, 7)

    def test_kernel_weights_match_formula(self):
        np.testing.assert_allclose(D.gaussian_kernel_1d(1.7, 4), gaussian_weights(1.7, 4), atol=1e-15)

    @pytest.mark.parametrize("kernel", [D.box_kernel(5), D.motion_kernel(5, 0), D.motion_kernel(7, 45),
                                        D.disk_kernel(5), D.gaussian_kernel(2.0)])
    def test_kernels_normalized(self, kernel):
        assert kernel.sum() == pytest.approx(1.0, abs=1e-12)
        assert (kernel >= 0).all()

    def test_motion_horizontal_line(self):
        img = np.zeros((9, 9))
        img[4, 4] = 1.0
        out = D.motion_blur(img, 5, 0.0)
        np.testing.assert_allclose(out[4, 2:7], 0.2, atol=1e-15)
        assert out.sum() == pytest.approx(1.0)
        assert np.count_nonzero(np.abs(out) > 1e-15) == 5

    def test_disk_is_round(self):
        k = D.disk_kernel(5)
        assert k.shape == (11, 11)
        assert k[0, 0] == 0 and k[0, 5] > 0

    def test_bad_parameters(self):
        with pytest.raises(D.DegradeError):
            D.gaussian_kernel(0.0)
        with pytest.raises(D.DegradeError):
            D.box_kernel(4)
        with pytest.raises(D.DegradeError):
            D.convolve2d(np.ones((5, 5)), np.ones((3, 3)))  # not unit-sum


class TestConvolution:
    def test_matches_brute_force(self, rng):
        for _ in range(5):
            img = rng.uniform(size=tuple(rng.integers(6, 12, size=2)))
            k = rng.uniform(size=(3, 5))
            k /= k.sum()
            np.testing.assert_allclose(D.convolve2d(img, k), brute_convolve2d(img, k), atol=1e-12)

    def test_separable_gaussian_matches_direct(self, rng):
        for _ in range(10):
            img = rng.uniform(size=(16, 20))
            sigma = rng.uniform(0.5, 2.5)
            direct = D.convolve2d(img, D.gaussian_kernel(sigma))
            np.testing.assert_allclose(D.gaussian_blur(img, sigma), direct, atol=1e-12)

    def test_gaussian_against_brute_force(self, rng):
        img = rng.uniform(size=(10, 9))
        np.testing.assert_allclose(D.gaussian_blur(img, 1.1), brute_convolve2d(img, D.gaussian_kernel(1.1)),
                                   atol=1e-12)

    def test_median_of_salt(self):
        img = np.zeros((7, 7))
        img[3, 3] = 1.0
        assert (D.median_blur(img, 3) == 0).all()

    @settings(max_examples=40, deadline=None)
    @given(c=st.floats(0.0, 1.0), h=st.integers(6, 14), w=st.integers(6, 14),
           method=st.sampled_from(["gaussian", "mean", "median", "motion", "defocus"]))
    def test_constant_images_preserved_exactly(self, c, h, w, method):
        img = np.full((h, w), c)
        assert np.array_equal(D.apply(D.DegradeSpec.make(method), img), img)


class TestSrad:
    def test_single_step_matches_loops(self, rng):
        img = rng.uniform(0.05, 1.0, size=(9, 11))
        np.testing.assert_allclose(D.srad_step(img, 0.1), srad_step_loops(img, 0.1), rtol=0, atol=1e-12)

    def test_constant_preserved_exactly(self):
        for c in (0.0, 0.3, 1.0):
            img = np.full((8, 8), c)
            assert np.array_equal(D.srad(img, 40, 0.1), img)

    def test_zero_iterations_identity(self, rng):
        img = rng.uniform(size=(6, 6))
        assert np.array_equal(D.srad(img, 0, 0.1), img)

    def test_smooths_speckle(self, rng):
        img = 0.5 * rng.gamma(4.0, 0.25, size=(24, 24))
        assert D.srad(img, 40, 0.1).std() < img.std()

    def test_coefficient_range(self, rng):
        c = D.srad_diffusivity(rng.uniform(0.1, 1.0, size=(12, 12)))
        assert c.min() >= 0 and c.max() <= 1

    def test_step_bounds(self):
        with pytest.raises(D.DegradeError):
            D.srad(np.ones((4, 4)), 3, 0.3)
        with pytest.raises(D.DegradeError):
            D.srad(np.ones((4, 4)), -1, 0.1)


class TestSpecAndNoise:
    def test_defaults(self):
        assert D.DegradeSpec.make("gaussian").kwargs == {"sigma": 1.1}
        assert D.DegradeSpec.make("srad").kwargs == {"dt": 0.1, "n_iter": 40}
        assert D.DegradeSpec.make("defocus").kwargs == {"radius": 5}

    def test_round_trip_and_equality(self):
        spec = D.DegradeSpec.make("motion", k=7, angle=30)
        assert D.DegradeSpec.from_dict(spec.to_dict()) == spec
        assert D.DegradeSpec.make("gaussian", sigma=1.1) == D.DegradeSpec.make("gaussian")

    def test_rejects_unknown(self):
        with pytest.raises(D.DegradeError):
            D.DegradeSpec.make("sharpen")
        with pytest.raises(D.DegradeError):
            D.DegradeSpec.make("gaussian", radius=3)

    def test_noise_is_seeded_and_unclamped(self):
        img = np.full((64, 64), 0.95)
        a = D.additive_noise(img, 0.2, np.random.default_rng(5))
        b = D.additive_noise(img, 0.2, np.random.default_rng(5))
        assert np.array_equal(a, b)
        assert a.max() > 1.0
        assert (a - img).std() == pytest.approx(0.2, rel=0.05)

    def test_noise_needs_rng(self):
        with pytest.raises(D.DegradeError):
            D.apply(D.DegradeSpec.make("noise"), np.ones((4, 4)))

    def test_identity_copies(self, rng):
        img = rng.uniform(size=(5, 5))
        out = D.apply(D.DegradeSpec.make("identity"), img)
        assert np.array_equal(out, img) and out is not img
