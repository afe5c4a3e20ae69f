"""
Tests for the loss terms and their gradients.

"""
import unittest

import numpy as np

from fipt.fields import BrdfField, EmissionMaskField
from fipt.losses import (TrainingPixels, diffuse_prior, emission_l1,
                         loss_diffuse_prior, loss_emission_reg,
                         loss_masked_render, loss_part_propagation,
                         masked_render, part_propagation, semantic_kernel,
                         semantic_propagation)
from fipt.tests.tests_common.fixtures import get_small_field_config

AABB = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]


def _batch(count=10, seed=0):
    """Training pixels with random shadings and two groups."""
    rng = np.random.default_rng(seed)
    x = rng.random((count, 3))
    return TrainingPixels(np.zeros(count), np.arange(count),
                          np.arange(count), x, x,
                          rng.uniform(0.1, 2.0, (count, 3)),
                          rng.random((count, 3)), rng.random((6, count, 3)),
                          rng.random((6, count, 3)),
                          np.arange(count) % 2)


class TestMaskedRender(unittest.TestCase):
    """Tests for the masked, tone-mapped render loss."""

    def setUp(self):
        rng = np.random.default_rng(1)
        self.rendered = rng.uniform(0.1, 3.0, (6, 3))
        self.observed = rng.uniform(0.1, 3.0, (6, 3))
        self.alpha = rng.uniform(0.0, 0.9, 6)

    def test_full_mask_hides_the_residual(self):
        """Where alpha is one the loss and its gradients vanish."""
        loss, d_rendered, _ = masked_render(self.rendered, self.observed,
                                            np.ones(6))

        assert loss == 0.0
        assert np.all(d_rendered == 0.0)

    def test_perfect_render(self):
        """Rendering the observation costs nothing."""
        loss, _, d_alpha = masked_render(self.observed, self.observed,
                                         self.alpha)

        assert loss == 0.0 and np.all(d_alpha == 0.0)

    def test_gradients_match_finite_differences(self):
        """Gradients of rendered radiance and alpha are exact."""
        h = 1e-6
        _, d_rendered, d_alpha = masked_render(self.rendered, self.observed,
                                               self.alpha)

        step = np.zeros_like(self.rendered)
        step[2, 1] = h
        numeric = (masked_render(self.rendered + step, self.observed,
                                 self.alpha)[0]
                   - masked_render(self.rendered - step, self.observed,
                                   self.alpha)[0]) / (2 * h)
        assert np.isclose(d_rendered[2, 1], numeric, rtol=1e-5, atol=1e-10)

        step = np.zeros_like(self.alpha)
        step[4] = h
        numeric = (masked_render(self.rendered, self.observed,
                                 self.alpha + step)[0]
                   - masked_render(self.rendered, self.observed,
                                   self.alpha - step)[0]) / (2 * h)
        assert np.isclose(d_alpha[4], numeric, rtol=1e-5, atol=1e-10)


class TestRegularizers(unittest.TestCase):
    """Tests for the emission and diffuse regularizers."""

    def test_emission_subgradient_at_zero(self):
        """The L1 subgradient is zero where e is zero."""
        loss, d_e = emission_l1(np.array([-2.0, 0.0, 1.0]))

        assert np.isclose(loss, 1.0)
        assert np.allclose(d_e, [-1 / 3, 0.0, 1 / 3])

    def test_diffuse_prior_minimum(self):
        """Rough dielectrics cost nothing."""
        loss, d_m, d_sigma = diffuse_prior(np.zeros(3), np.ones(3))

        assert loss == 0.0
        assert np.all(d_m == 0.0) and np.all(d_sigma == 0.0)

    def test_diffuse_prior_value(self):
        """The prior is weight * mean(|1 - sigma| + |m|)."""
        loss, d_m, d_sigma = diffuse_prior(np.array([0.5, 1.0]),
                                           np.array([0.0, 0.5]), weight=2.0)

        assert np.isclose(loss, 2.0 * (1.5 + 1.5) / 2)
        assert np.allclose(d_m, [1.0, 1.0])
        assert np.allclose(d_sigma, [-1.0, -1.0])


class TestPropagation(unittest.TestCase):
    """Tests for the propagation of roughness and metallic."""

    def test_highlight_weighted_target(self):
        """Samples are pulled toward the highlight-weighted group mean."""
        m = np.array([0.0, 1.0, 0.5])
        sigma = np.array([0.2, 0.6, 0.4])
        highlight = np.array([3.0, 1.0, 0.0])

        loss, d_m, d_sigma = part_propagation([0, 0, 0], m, sigma,
                                              highlight, weight=1.0)

        target_m, target_sigma = 0.25, 0.3
        expected = np.sum(np.abs(m - target_m)
                          + np.abs(sigma - target_sigma)) / 3
        assert np.isclose(loss, expected)
        assert np.allclose(d_m, np.sign(m - target_m) / 3)
        assert np.allclose(d_sigma, np.sign(sigma - target_sigma) / 3)

    def test_group_without_highlight_is_skipped(self):
        """Groups whose highlight weights are all zero add nothing."""
        loss, d_m, d_sigma = part_propagation(
            [0, 0, 1, 1], np.array([0.1, 0.9, 0.3, 0.3]),
            np.array([0.5, 0.7, 0.2, 0.2]), np.array([0.0, 0.0, 1.0, 1.0]))

        assert loss == 0.0
        assert np.all(d_m == 0.0) and np.all(d_sigma == 0.0)

    def test_label_zero_is_a_group(self):
        """Samples with segment 0 propagate among themselves."""
        loss, _, _ = part_propagation([0, 0], np.array([0.0, 1.0]),
                                      np.array([0.5, 0.5]),
                                      np.array([1.0, 1.0]), weight=1.0)

        assert np.isclose(loss, 0.5)

    def test_kernel_of_identical_samples(self):
        """Identical albedo and position give weight one."""
        a = np.array([[0.2, 0.4, 0.6]])
        x = np.array([[0.5, 0.5, 0.5]])

        assert np.allclose(semantic_kernel(a, x, a, x), 1.0)
        assert semantic_kernel(a, x, a, x + 0.5)[0, 0] < 1e-100

    def test_semantic_targets_stay_within_similar_samples(self):
        """Only similar samples of the same group contribute."""
        a = np.array([[0.5, 0.5, 0.5]] * 3 + [[0.9, 0.1, 0.1]])
        x = np.zeros((4, 3))
        m = np.array([0.0, 0.3, 0.6, 1.0])
        sigma = np.full(4, 0.5)

        loss, d_m, _ = semantic_propagation(np.zeros(4), m, sigma, a, x,
                                            weight=1.0)

        expected = (0.3 + 0.0 + 0.3 + 0.0) / 4
        assert np.isclose(loss, expected)
        assert d_m[3] == 0.0


class TestFieldLosses(unittest.TestCase):
    """Tests for the losses evaluated on the fields."""

    def setUp(self):
        config = get_small_field_config(mask_output_bias=3.0)
        self.brdf = BrdfField(AABB, config)
        self.mask = EmissionMaskField(AABB, config)
        self.batch = _batch()

    def test_render_loss_updates_both_fields(self):
        """The masked render loss has gradients for both fields."""
        loss, gradients = loss_masked_render(self.batch, self.brdf,
                                             self.mask)

        assert loss > 0
        assert set(self.brdf.params) <= set(gradients)
        assert set(self.mask.params) <= set(gradients)

    def test_render_loss_gradients(self):
        """Output bias gradients agree with central differences."""
        _, gradients = loss_masked_render(self.batch, self.brdf, self.mask)
        h = 1e-6

        for field, name, index in ((self.brdf, "brdf.mlp.b2", 4),
                                   (self.brdf, "brdf.mlp.b2", 0),
                                   (self.mask, "mask.mlp.b2", 0)):
            original = field.params[name][index]
            field.params[name][index] = original + h
            upper = loss_masked_render(self.batch, self.brdf, self.mask)[0]
            field.params[name][index] = original - h
            lower = loss_masked_render(self.batch, self.brdf, self.mask)[0]
            field.params[name][index] = original

            assert np.isclose(gradients[name][index], (upper - lower)
                              / (2 * h), rtol=1e-4, atol=1e-9), name

    def test_regularizers_touch_one_field(self):
        """Each regularizer only returns gradients of its own field."""
        _, mask_gradients = loss_emission_reg(self.mask, self.batch)
        _, brdf_gradients = loss_diffuse_prior(self.brdf, self.batch)

        assert set(mask_gradients) == set(self.mask.params)
        assert set(brdf_gradients) == set(self.brdf.params)

    def test_propagation_modes(self):
        """Both propagation modes give finite losses and gradients."""
        for grouping in ("part", "semantic"):
            loss, gradients = loss_part_propagation(self.brdf, self.batch,
                                                    grouping)

            assert np.isfinite(loss) and loss >= 0
            assert all(np.all(np.isfinite(g)) for g in gradients.values())

    def test_unknown_grouping(self):
        """Only part and semantic groupings exist."""
        with self.assertRaises(ValueError):
            loss_part_propagation(self.brdf, self.batch, "instance")
