"""
Tests for the reflectance model and its importance sampling.

"""
import unittest

import numpy as np

from fipt import brdf
from fipt.brdf import BrdfParams
from fipt.constants import DIELECTRIC_F0


def _directions(rng, count):
    """Random directions in the upper hemisphere of +z."""
    d = rng.normal(size=(count, 3))
    d[:, 2] = np.abs(d[:, 2]) + 0.05
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestCoefficients(unittest.TestCase):
    """Tests for the mapping of base color and metallic."""

    def test_dielectric_and_metal(self):
        """Dielectrics reflect 4 % specularly, metals their base color."""
        a = np.array([[0.2, 0.5, 0.8], [0.2, 0.5, 0.8]])
        k_d, k_s = brdf.coeffs(a, np.array([0.0, 1.0]))

        assert np.allclose(k_d[0], a[0]) and np.allclose(k_d[1], 0.0)
        assert np.allclose(k_s[0], DIELECTRIC_F0)
        assert np.allclose(k_s[1], a[1])

    def test_parameter_range(self):
        """Parameters outside [0, 1] are rejected."""
        with self.assertRaises(ValueError):
            BrdfParams([[0.5, 0.5, 1.5]], [0.0], [0.5])


class TestEvaluation(unittest.TestCase):
    """Tests for evaluating the reflectance."""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.count = 200
        self.wi = _directions(rng, self.count)
        self.wo = _directions(rng, self.count)
        self.n = np.tile([0.0, 0.0, 1.0], (self.count, 1))
        self.params = BrdfParams(rng.random((self.count, 3)),
                                 rng.random(self.count),
                                 rng.random(self.count))

    def test_factored_terms_recombine(self):
        """k_d g_d + k_s g_s0 + g_s1 equals the full evaluation."""
        k_d, k_s = self.params.coefficients()
        g_d, g_s0, g_s1 = brdf.eval_factored(self.params.sigma, self.wi,
                                             self.wo, self.n)

        combined = k_d * g_d[:, None] + k_s * g_s0[:, None] + g_s1[:, None]

        assert np.allclose(combined, brdf.eval(self.params, self.wi,
                                               self.wo, self.n))

    def test_below_horizon(self):
        """Light from below the surface is not reflected."""
        below = self.wi * [1.0, 1.0, -1.0]

        assert np.all(brdf.eval(self.params, below, self.wo, self.n) == 0)

    def test_normal_faces_the_viewer(self):
        """Flipped shading normals give the same result."""
        value = brdf.eval(self.params, self.wi, self.wo, self.n)
        flipped = brdf.eval(self.params, self.wi, self.wo, -self.n)

        assert np.allclose(value, flipped)

    def test_reciprocity(self):
        """f is symmetric, so f cos / cos is too."""
        forward = brdf.eval(self.params, self.wi, self.wo, self.n) \
            / self.wi[:, 2:3]
        backward = brdf.eval(self.params, self.wo, self.wi, self.n) \
            / self.wo[:, 2:3]

        assert np.allclose(forward, backward)


class TestSampling(unittest.TestCase):
    """Tests for lobe sampling."""

    def test_sample_density_matches_pdf(self):
        """Sampled densities agree with pdf for the same directions."""
        rng = np.random.default_rng(2)
        count = 300
        wo = _directions(rng, count)
        n = np.tile([0.0, 0.0, 1.0], (count, 1))
        params = BrdfParams(rng.random((count, 3)), rng.random(count),
                            rng.uniform(0.1, 1.0, count))

        lobe = brdf.sample(params, wo, n, rng.random((count, 3)))

        assert np.allclose(lobe.pdf, brdf.pdf(params, lobe.wi, wo, n))
        assert np.allclose(np.linalg.norm(lobe.wi, axis=1), 1.0)

    def test_cosine_pdf_integrates_to_one(self):
        """The cosine lobe density integrates to one over the sphere."""
        rng = np.random.default_rng(4)
        d = rng.normal(size=(200000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        n = np.tile([0.0, 0.0, 1.0], (len(d), 1))

        integral = 4 * np.pi * brdf.pdf_cosine(d, n).mean()

        assert abs(integral - 1.0) < 0.015

    def test_smooth_metal_reflects_everything(self):
        """A smooth white metal has a directional albedo of about one."""
        rng = np.random.default_rng(5)
        wo = _directions(rng, 20)
        n = np.tile([0.0, 0.0, 1.0], (20, 1))
        params = BrdfParams.constant([1.0, 1.0, 1.0], 1.0, 0.0, 20)

        albedo = brdf.reflectance(params, wo, n, rng, spp=4096)

        assert np.allclose(albedo, 1.0, atol=0.05)

    def test_rough_dielectric_albedo(self):
        """A rough dielectric reflects its base color plus some gloss."""
        rng = np.random.default_rng(6)
        wo = np.tile([0.0, 0.0, 1.0], (10, 1))
        n = wo.copy()
        params = BrdfParams.constant([0.5, 0.5, 0.5], 0.0, 1.0, 10)

        albedo = brdf.reflectance(params, wo, n, rng, spp=2048).mean()

        assert 0.49 < albedo < 0.65

    def test_white_furnace(self):
        """A white rough dielectric neither gains nor loses much energy."""
        rng = np.random.default_rng(7)
        n = np.array([[0.0, 0.0, 1.0]])
        params = BrdfParams.constant([1.0, 1.0, 1.0], 0.0, 1.0, 1)

        for theta in (0.0, 0.5, 1.0, 1.3):
            wo = np.array([[np.sin(theta), 0.0, np.cos(theta)]])

            albedo = brdf.reflectance(params, wo, n, rng, spp=10**6)

            assert np.all((albedo >= 0.95) & (albedo <= 1.05)), theta
