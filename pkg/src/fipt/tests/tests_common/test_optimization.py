"""
Tests for the field fit.

"""
import os
import shutil
import tempfile
import unittest

import numpy as np

from fipt.fields import JOINT_EMISSION_BLOCK, SceneFields
from fipt.optimization import (LOSS_TERMS, Adam, DivergenceError,
                               OptimConfig, extract_joint_emitters,
                               gather_training_pixels, optimize_stage2,
                               write_loss_curve)
from fipt.tests.tests_common.fixtures import (get_small_field_config,
                                              get_test_scene,
                                              get_test_shadings,
                                              get_test_truth)


def _fields():
    return SceneFields(get_test_scene().aabb, get_small_field_config())


def _config(**overrides):
    options = {"lr": 1e-2, "batch_size": 64, "epochs": 1}
    options.update(overrides)
    return OptimConfig(**options)


class TestOptimConfig(unittest.TestCase):
    """Tests for the optimizer settings."""

    def test_propagation_weight_defaults(self):
        """The propagation weight depends on the grouping."""
        assert OptimConfig().lambda_propagation == 5e-3
        assert OptimConfig(grouping="SEMANTIC").lambda_propagation == 1e-3
        assert OptimConfig(grouping="semantic",
                           lambda_propagation=0.0).lambda_propagation == 0.0

    def test_invalid_options(self):
        """Negative rates and unknown groupings are rejected."""
        with self.assertRaises(ValueError):
            OptimConfig(lr=-1.0)
        with self.assertRaises(ValueError):
            OptimConfig(grouping="instance")
        with self.assertRaises(ValueError):
            OptimConfig(lambda_emission=-0.1)


class TestAdam(unittest.TestCase):
    """Tests for the optimizer."""

    def test_first_step_has_learning_rate_size(self):
        """The bias-corrected first step moves each entry by about lr."""
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.array([0.5, -4.0, 1e-3])}

        Adam(lr=0.1).step(params, grads)

        assert np.allclose(params["w"], [0.9, -1.9, 2.9], atol=1e-4)

    def test_zero_learning_rate(self):
        """lr = 0 leaves parameters unchanged."""
        params = {"w": np.array([1.0, 2.0])}
        optimizer = Adam(lr=0.0)

        for _ in range(3):
            optimizer.step(params, {"w": np.array([1.0, -1.0])})

        assert np.array_equal(params["w"], [1.0, 2.0])

    def test_parameters_without_gradient(self):
        """Parameters missing from the gradients keep their value."""
        params = {"a": np.ones(2), "b": np.ones(2)}

        Adam(lr=0.5).step(params, {"a": np.ones(2)})

        assert np.array_equal(params["b"], np.ones(2))
        assert np.all(params["a"] < 1.0)


class TestTrainingPixels(unittest.TestCase):
    """Tests for collecting training pixels."""

    def test_all_hit_pixels(self):
        """Every pixel with a primary hit becomes one sample."""
        shadings = get_test_shadings()

        pixels = gather_training_pixels(get_test_scene(), shadings)

        assert len(pixels) == sum(int(np.count_nonzero(v.valid))
                                  for v in shadings.views)
        assert pixels.ls0.shape == (6, len(pixels), 3)
        assert np.all((pixels.x >= 0) & (pixels.x <= 1))

    def test_emitter_pixels_can_be_excluded(self):
        """Samples on known emitters are dropped on request."""
        scene = get_test_scene()
        shadings = get_test_shadings()
        emitters = get_test_truth().emitters

        pixels = gather_training_pixels(scene, shadings,
                                        exclude_triangles=emitters.is_emitter)

        assert not np.any(emitters.is_emitter(pixels.triangles))

    def test_groups_follow_the_grouping(self):
        """Propagation groups are the labels of the hit triangles."""
        scene = get_test_scene()

        pixels = gather_training_pixels(scene, get_test_shadings(),
                                        "semantic")

        assert np.array_equal(pixels.groups,
                              scene.semantic_labels[pixels.triangles])


class TestOptimize(unittest.TestCase):
    """Tests for fitting the fields."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_deterministic(self):
        """Two fits with the same seed give the same parameters."""
        first = optimize_stage2(get_test_scene(), get_test_shadings(),
                                _fields(), _config())
        second = optimize_stage2(get_test_scene(), get_test_shadings(),
                                 _fields(), _config())

        for name, param in first.params.items():
            assert np.array_equal(param, second.params[name]), name
        assert len(first.loss_history) == len(second.loss_history) > 0

    def test_loss_history(self):
        """Every step records all loss terms."""
        fields = optimize_stage2(get_test_scene(), get_test_shadings(),
                                 _fields(), _config(epochs=2))

        record = fields.loss_history[-1]
        assert record["epoch"] == 1 and record["fit"] == 0
        assert set(LOSS_TERMS) <= set(record)
        assert np.isclose(record["total"],
                          sum(record[k] for k in LOSS_TERMS[:-1]))

    def test_known_emitters_freeze_the_mask(self):
        """With known emitters the mask parameters do not move."""
        fields = _fields()
        before = {k: v.copy() for k, v in fields.mask.params.items()}

        optimize_stage2(get_test_scene(), get_test_shadings(), fields,
                        _config(), emitters_known=get_test_truth().emitters)

        for name, param in fields.mask.params.items():
            assert np.array_equal(param, before[name]), name
        assert all(r["emission"] == 0.0 for r in fields.loss_history)

    def test_joint_emission(self):
        """A joint fit adds a per-triangle emission."""
        fields = optimize_stage2(get_test_scene(), get_test_shadings(),
                                 _fields(), _config(), joint_emission=True)

        assert fields.log_emission.shape == (len(get_test_scene().mesh), 3)
        assert JOINT_EMISSION_BLOCK in fields.params
        assert fields.loss_history[0]["joint"] > 0

    def test_divergence_dumps_state(self):
        """Non-finite parameters stop the fit with a state dump."""
        fields = _fields()
        fields.brdf.params["brdf.mlp.b0"][0] = np.nan

        with self.assertRaises(DivergenceError) as context:
            optimize_stage2(get_test_scene(), get_test_shadings(), fields,
                            _config(), dump_folder=self.folder)

        assert context.exception.dump_path == self.folder
        assert os.path.isfile(os.path.join(self.folder, "fields.ckpt"))
        assert os.path.isfile(os.path.join(self.folder, "state.json"))


class TestJointEmitters(unittest.TestCase):
    """Tests for emitters from a joint emission fit."""

    def test_relative_threshold(self):
        """Triangles above a fraction of the brightest one emit."""
        fields = _fields()
        fields.log_emission = np.log(np.array([[1e-3] * 3, [5.0] * 3,
                                               [1.0] * 3, [0.2] * 3]))

        emitters = extract_joint_emitters(fields, 4, threshold=0.1)

        assert emitters.triangles.tolist() == [1, 2]
        assert np.allclose(emitters.radiance, [[5.0] * 3, [1.0] * 3])

    def test_requires_a_joint_fit(self):
        """Fields without joint emission have no emitters to extract."""
        with self.assertRaises(ValueError):
            extract_joint_emitters(_fields(), 4)


class TestLossCurve(unittest.TestCase):
    """Tests for the loss curve CSV."""

    def test_header_and_rows(self):
        """One header line and one line per record."""
        folder = tempfile.mkdtemp()
        try:
            file_name = os.path.join(folder, "loss.csv")
            record = dict.fromkeys(LOSS_TERMS, 0.5)
            record.update({"fit": 0, "epoch": 0, "step": 3})

            write_loss_curve([record], file_name)

            with open(file_name) as csv_file:
                lines = csv_file.read().splitlines()
            assert lines[0] == "fit,epoch,step,render,emission,diffuse," \
                "propagation,joint,total"
            assert lines[1].startswith("0,0,3,0.5")
            assert len(lines) == 2
        finally:
            shutil.rmtree(folder, ignore_errors=True)
