"""
Tests for the quality metrics.

"""
import os
import shutil
import tempfile
import unittest

import numpy as np

from fipt.constants import PSNR_CAP
from fipt.fields import SceneFields
from fipt.metrics import (emitter_iou, evaluate_run, log_l2, psnr,
                          tonemapped_psnr)
from fipt.renderer import RenderConfig
from fipt.synthetic import gen_synthetic
from fipt.tests.tests_common.fixtures import (get_small_field_config,
                                              get_test_spec)


class TestImageMetrics(unittest.TestCase):
    """Tests for PSNR and log L2."""

    def test_identical_images_hit_the_cap(self):
        """Equal inputs return the cap instead of infinity."""
        image = np.full((2, 2, 3), 0.3)

        assert psnr(image, image) == PSNR_CAP

    def test_known_value(self):
        """A uniform error of 0.1 is 20 dB."""
        assert np.isclose(psnr(np.full((4, 3), 0.6), np.full((4, 3), 0.5)),
                          20.0)

    def test_mask(self):
        """Only masked pixels are compared; an empty mask gives nan."""
        pred = np.zeros((1, 2, 3))
        gt = np.zeros((1, 2, 3))
        gt[0, 1] = 1.0

        assert psnr(pred, gt, mask=[[True, False]]) == PSNR_CAP
        assert np.isnan(psnr(pred, gt, mask=[[False, False]]))

    def test_shape_mismatch(self):
        """Inputs of different shapes are rejected."""
        with self.assertRaises(ValueError):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_tonemapped_psnr_clips(self):
        """Values above one are clipped before comparison."""
        assert tonemapped_psnr(np.full((2, 3), 5.0),
                               np.full((2, 3), 9.0)) == PSNR_CAP

    def test_log_l2(self):
        """log L2 compares log(1 + x) and is zero for an empty mask."""
        pred = np.array([[np.e - 1.0, 0.0, 0.0]])
        gt = np.zeros((1, 3))

        assert np.isclose(log_l2(pred, gt), 1.0 / 3.0)
        assert log_l2(pred, gt, mask=[False]) == 0.0


class TestEmitterIou(unittest.TestCase):
    """Tests for the emitter intersection over union."""

    def test_partial_overlap(self):
        """Shared triangles over all triangles."""
        assert emitter_iou([1, 2, 3], [2, 3, 4]) == 0.5

    def test_empty_sets(self):
        """Two empty sets agree perfectly, one empty set not at all."""
        assert emitter_iou([], []) == 1.0
        assert emitter_iou([], [1]) == 0.0


class TestEvaluateRun(unittest.TestCase):
    """Tests for comparing a reconstruction with its ground truth."""

    @classmethod
    def setUpClass(cls):
        cls.folder = tempfile.mkdtemp()
        cls.scene, cls.truth = gen_synthetic(get_test_spec(), cls.folder)
        cls.gt_folder = os.path.join(cls.folder, "gt")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.folder, ignore_errors=True)

    def test_report_without_renders(self):
        """Material and emitter metrics are reported per run."""
        fields = SceneFields(self.scene.aabb, get_small_field_config())

        report = evaluate_run(self.scene, fields, self.truth.emitters,
                              self.gt_folder, albedo_spp=4, render=False)

        assert report["emitter_iou"] == 1.0
        assert report["views"] == 2
        for key in ("kd_psnr", "albedo_psnr", "roughness_psnr"):
            assert 0.0 < report[key] <= PSNR_CAP
        assert report["emission_log_l2"] == 0.0 \
            or np.isnan(report["emission_log_l2"])
        assert "view_psnr" not in report

    def test_report_with_renders(self):
        """View synthesis is scored when rendering is enabled."""
        fields = SceneFields(self.scene.aabb, get_small_field_config())

        report = evaluate_run(self.scene, fields, self.truth.emitters,
                              self.gt_folder, RenderConfig(spp=1,
                                                           max_depth=2),
                              views=[0], albedo_spp=2)

        assert report["views"] == 1
        assert np.isfinite(report["view_psnr"])
        assert "relight_psnr" not in report
