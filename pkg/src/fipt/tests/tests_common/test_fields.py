"""
Tests for the neural material and emission mask fields.

"""
import os
import shutil
import tempfile
import unittest

import numpy as np

from fipt.fields import (JOINT_EMISSION_BLOCK, BrdfField, EmissionMaskField,
                         FieldConfig, FrequencyEncoding, HashGridEncoding,
                         NonFiniteGradientError, SceneFields,
                         check_gradients, normalize_positions)
from fipt.tests.tests_common.fixtures import get_small_field_config

AABB = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]


def _numeric_gradient(params, name, index, loss, h=1e-6):
    """Central difference of ``loss()`` for one parameter entry."""
    original = params[name][index]
    params[name][index] = original + h
    upper = loss()
    params[name][index] = original - h
    lower = loss()
    params[name][index] = original
    return (upper - lower) / (2 * h)


class TestFieldConfig(unittest.TestCase):
    """Tests for architecture validation."""

    def test_defaults(self):
        """The default mask has six hidden layers of width 128."""
        config = FieldConfig()

        assert (config.mask_layers, config.mask_hidden) == (6, 128)
        assert config.encoding == "hash"

    def test_encoding_names_are_case_insensitive(self):
        """Encodings are matched regardless of case."""
        assert FieldConfig(encoding="Frequency").encoding == "frequency"

    def test_invalid_options(self):
        """Unknown encodings and shallow masks are rejected."""
        with self.assertRaises(ValueError):
            FieldConfig(encoding="fourier")
        with self.assertRaises(ValueError):
            FieldConfig(mask_layers=1)
        with self.assertRaises(ValueError):
            FieldConfig(dtype="float16")

    def test_unknown_keys(self):
        """Configs from dictionaries reject unknown options."""
        with self.assertRaises(ValueError):
            FieldConfig.from_dict({"layers": 3})


class TestEncodings(unittest.TestCase):
    """Tests for the position encodings."""

    def test_level_resolutions(self):
        """Level l has floor(base * growth ** l) cells per axis."""
        encoding = HashGridEncoding("grid", FieldConfig(
            levels=4, base_resolution=16, growth=1.5))

        assert encoding.resolutions == [16, 24, 36, 54]
        assert encoding.output_dim == 8

    def test_dense_and_hashed_levels(self):
        """Only levels that fit into the table are stored densely."""
        config = get_small_field_config(log2_table_size=5)
        encoding = HashGridEncoding("grid", config)
        params = encoding.init_params(np.random.default_rng(0), np.float64)

        assert encoding.dense == [True, False]
        assert params["grid.0"].shape == (27, 2)
        assert params["grid.1"].shape == (32, 2)

    def test_grid_vertices_are_interpolated_exactly(self):
        """At a grid vertex the encoding is that vertex's feature."""
        config = get_small_field_config(levels=1)
        encoding = HashGridEncoding("grid", config)
        params = {"grid.0": np.arange(54, dtype=float).reshape(27, 2)}

        features, _ = encoding.forward(params, np.array([[0.5, 0.0, 1.0]]))

        index = (1 * 3 + 0) * 3 + 2
        assert np.allclose(features[0], params["grid.0"][index])

    def test_frequency_width(self):
        """Ten bands encode a position into 63 values."""
        encoding = FrequencyEncoding(10)
        features, _ = encoding.forward({}, np.zeros((2, 3)))

        assert encoding.output_dim == 63
        assert features.shape == (2, 63)

    def test_normalized_positions_are_clamped(self):
        """Positions outside the AABB map to the unit cube border."""
        unit = normalize_positions([[0.0, 2.0, -3.0]], AABB)

        assert np.allclose(unit, [[0.5, 1.0, 0.0]])


class TestBrdfField(unittest.TestCase):
    """Tests for the material field."""

    def setUp(self):
        self.field = BrdfField(AABB, get_small_field_config(
            log2_table_size=5))
        rng = np.random.default_rng(3)
        self.x = rng.random((16, 3))
        self.weights = rng.normal(size=(16, 5))

    def _loss(self):
        outputs, _ = self.field.forward(self.x)
        return float(np.sum(outputs * self.weights))

    def test_outputs_in_unit_interval(self):
        """All five outputs are in (0, 1)."""
        outputs, _ = self.field.forward(self.x)

        assert outputs.shape == (16, 5)
        assert np.all((outputs > 0) & (outputs < 1))

    def test_gradients_match_finite_differences(self):
        """Backward agrees with central differences for every block."""
        _, cache = self.field.forward(self.x)
        gradients = self.field.backward(cache, self.weights)
        rng = np.random.default_rng(4)

        assert set(gradients) == set(self.field.params)
        for name, param in self.field.params.items():
            index = tuple(rng.integers(0, s) for s in param.shape)
            numeric = _numeric_gradient(self.field.params, name, index,
                                        self._loss)
            assert np.isclose(gradients[name][index], numeric, rtol=1e-4,
                              atol=1e-7), name

    def test_query_splits_outputs(self):
        """query returns base color, metallic and roughness."""
        a, m, sigma = self.field.query([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]])

        assert a.shape == (2, 3) and m.shape == (2,) and sigma.shape == (2,)

    def test_seeded_initialization(self):
        """The same seed gives the same parameters."""
        other = BrdfField(AABB, get_small_field_config(log2_table_size=5))

        for name, param in self.field.params.items():
            assert np.array_equal(param, other.params[name])


class TestEmissionMaskField(unittest.TestCase):
    """Tests for the emission mask."""

    def test_output_bias_starts_empty(self):
        """A negative output bias with zeroed layers gives alpha = 0."""
        field = EmissionMaskField(AABB, get_small_field_config(
            mask_output_bias=-1.0))
        last = "mask.mlp.w{}".format(len(field.mlp.sizes) - 2)
        field.params[last][:] = 0.0

        assert np.all(field.alpha([[0.1, 0.2, 0.3]]) == 0.0)

    def test_alpha_from_positive_bias(self):
        """alpha is 1 - exp(-e) for positive e."""
        field = EmissionMaskField(AABB, get_small_field_config(
            mask_output_bias=2.0))
        last = "mask.mlp.w{}".format(len(field.mlp.sizes) - 2)
        field.params[last][:] = 0.0

        alpha, e, _ = field.forward(np.array([[0.5, 0.5, 0.5]]))

        assert np.isclose(e[0], 2.0)
        assert np.isclose(alpha[0], 1.0 - np.exp(-2.0))

    def test_gradients_match_finite_differences(self):
        """Backward agrees with central differences for alpha and e."""
        field = EmissionMaskField(AABB, get_small_field_config(
            mask_output_bias=3.0))
        rng = np.random.default_rng(5)
        x = rng.random((12, 3))
        w_alpha, w_e = rng.normal(size=12), rng.normal(size=12)

        def loss():
            alpha, e, _ = field.forward(x)
            return float(np.sum(alpha * w_alpha) + np.sum(e * w_e))

        alpha, e, cache = field.forward(x)
        gradients = field.backward(cache, w_alpha, w_e)

        for name, param in field.params.items():
            index = tuple(rng.integers(0, s) for s in param.shape)
            numeric = _numeric_gradient(field.params, name, index, loss)
            assert np.isclose(gradients[name][index], numeric, rtol=1e-4,
                              atol=1e-7), name

    def test_non_finite_gradients(self):
        """A bad block is reported by name."""
        gradients = {"a": np.zeros(3), "b": np.array([0.0, np.nan])}

        with self.assertRaises(NonFiniteGradientError) as context:
            check_gradients(gradients)
        assert context.exception.block == "b"


class TestCheckpoints(unittest.TestCase):
    """Tests for saving and loading the fields."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()
        self.file_name = os.path.join(self.folder, "fields.ckpt")

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_save_and_load(self):
        """Checkpoints restore parameters and the loss history."""
        fields = SceneFields(AABB, get_small_field_config(dtype="float32"))
        fields.loss_history = [{"epoch": 0, "total": 1.5}]
        fields.log_emission = np.full(4, -2.0, dtype=np.float32)

        fields.save(self.file_name)
        loaded = SceneFields.load(self.file_name)

        assert loaded.loss_history == fields.loss_history
        assert np.allclose(loaded.aabb, AABB)
        assert set(loaded.params) == set(fields.params)
        for name, param in fields.params.items():
            assert np.array_equal(loaded.params[name], param), name
        assert JOINT_EMISSION_BLOCK in loaded.params
        assert np.allclose(loaded.joint_emission(), np.exp(-2.0))

    def test_bad_magic(self):
        """Files without the checkpoint magic are rejected."""
        with open(self.file_name, "wb") as checkpoint:
            checkpoint.write(b"\x00" * 32)

        with self.assertRaises(ValueError):
            SceneFields.load(self.file_name)

    def test_trailing_data(self):
        """Extra bytes after the parameters are rejected."""
        SceneFields(AABB, get_small_field_config()).save(self.file_name)
        with open(self.file_name, "ab") as checkpoint:
            checkpoint.write(b"\x00\x00\x00\x00")

        with self.assertRaises(ValueError):
            SceneFields.load(self.file_name)
