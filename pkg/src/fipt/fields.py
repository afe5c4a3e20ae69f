# -*- coding: utf-8 -*-
#
#   fipt - Factorized inverse path tracing for indoor scenes.
#
#   Copyright (C) 2024, the fipt developers
#
#    This program is free software: you can redistribute it and/or modify it under the terms of the GNU General Public License as published by the Free Software Foundation, either version 3 of the License, or (at your option) any later version.
#
#    This program is distributed in the hope that it will be useful, but WITHOUT ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
#
#    You should have received a copy of the GNU General Public License along with this program. If not, see https://www.gnu.org/licenses/.
"""
Differentiable spatial fields for materials and the emission mask.

A field maps positions, normalized to the unit cube by the scene AABB,
to outputs through a positional encoding and a small MLP. The
``BrdfField`` predicts base color, metallic and roughness; the
``EmissionMaskField`` predicts a pre-activation ``e`` with mask value
``alpha = 1 - exp(-relu(e))``.

Parameters are kept in dictionaries of numpy arrays. ``forward`` returns
the outputs together with a cache of intermediate values, ``backward``
maps output gradients to parameter gradients summed over the batch.

"""
import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from fipt.configuration import ConfigMixin
from fipt.constants import FILE_BYTE_ORDER_CHAR, FREQUENCY, HASH, as_constant
from fipt.fileio import FileManager

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)
CHECKPOINT_MAGIC = b"FIPTCKPT"
JOINT_EMISSION_BLOCK = "joint.log_emission"


class NonFiniteGradientError(ArithmeticError):
    """
    Raised when a backward pass produces non-finite gradients.

    Attributes
    ----------
    block : str
        Name of the parameter block with the first non-finite value.

    """

    def __init__(self, block):
        self.block = block
        super().__init__(
            "Non-finite gradient in parameter block '{}'.".format(block))


@dataclass
class FieldConfig(ConfigMixin):
    """Architecture of the material and emission mask fields."""
    encoding: str = "hash"
    levels: int = 16
    base_resolution: int = 16
    growth: float = 1.5
    features: int = 2
    log2_table_size: int = 19
    brdf_hidden: int = 64
    brdf_layers: int = 2
    frequency_bands: int = 10
    mask_hidden: int = 128
    mask_layers: int = 6
    mask_output_bias: float = -1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.encoding = str(as_constant(self.encoding, HASH, FREQUENCY))\
            .lower()
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'.")
        if self.mask_layers < 2:
            raise ValueError("The mask MLP needs at least two hidden layers.")
        for name in ("levels", "base_resolution", "features",
                     "log2_table_size", "brdf_hidden", "brdf_layers",
                     "frequency_bands", "mask_hidden"):
            if getattr(self, name) < 1:
                raise ValueError("{} must be positive.".format(name))
        if self.growth < 1.0:
            raise ValueError("growth must be at least 1.")


def normalize_positions(positions, aabb):
    """Map world positions into the unit cube of the AABB, clamped."""
    aabb = np.asarray(aabb, dtype=float).reshape(2, 3)
    unit = (np.atleast_2d(positions) - aabb[0]) / (aabb[1] - aabb[0])
    return np.clip(unit, 0.0, 1.0)


def check_gradients(gradients):
    """Raise ``NonFiniteGradientError`` for the first bad block."""
    for name in sorted(gradients):
        if not np.all(np.isfinite(gradients[name])):
            raise NonFiniteGradientError(name)


class HashGridEncoding(object):
    """
    Multiresolution feature grid with trilinear interpolation.

    Level ``l`` has ``floor(base * growth ** l)`` cells per axis. Levels
    whose vertices fit into the table are indexed densely, the others
    through a spatial hash.

    Parameters
    ----------
    prefix : str
        Prefix of the parameter names, e.g. ``'brdf.grid'``.
    config : FieldConfig
        Grid settings.

    """

    def __init__(self, prefix, config):
        self.prefix = prefix
        self.features = config.features
        self.table_size = 2 ** config.log2_table_size
        self.resolutions = [int(np.floor(config.base_resolution
                                         * config.growth ** level))
                            for level in range(config.levels)]
        self.dense = [(n + 1) ** 3 <= self.table_size
                      for n in self.resolutions]

    @property
    def output_dim(self):
        """Width of the encoding."""
        return len(self.resolutions) * self.features

    def names(self):
        """Parameter names of the feature tables."""
        return ["{}.{}".format(self.prefix, level)
                for level in range(len(self.resolutions))]

    def init_params(self, rng, dtype):
        """Feature tables uniform in [-1e-4, 1e-4]."""
        params = {}
        for name, n, dense in zip(self.names(), self.resolutions,
                                  self.dense):
            size = (n + 1) ** 3 if dense else self.table_size
            params[name] = rng.uniform(-1e-4, 1e-4,
                                       (size, self.features)).astype(dtype)
        return params

    def _indices(self, corners, level):
        n = self.resolutions[level]
        if self.dense[level]:
            return (corners[..., 0] * (n + 1) + corners[..., 1]) * (n + 1) \
                + corners[..., 2]
        c = corners.astype(np.uint64)
        hashed = (c[..., 0] * np.uint64(HASH_PRIMES[0])) \
            ^ (c[..., 1] * np.uint64(HASH_PRIMES[1])) \
            ^ (c[..., 2] * np.uint64(HASH_PRIMES[2]))
        return (hashed % np.uint64(self.table_size)).astype(np.int64)

    def forward(self, params, x):
        """
        Encode unit-cube positions.

        Returns
        -------
        features : numpy.ndarray[float]
            Shape (n, levels * features).
        cache : list
            Table indices and trilinear weights per level.

        """
        offsets = np.array([[i, j, k] for i in (0, 1) for j in (0, 1)
                            for k in (0, 1)])
        outputs, cache = [], []
        for level, (name, n) in enumerate(zip(self.names(),
                                              self.resolutions)):
            scaled = x * n
            base = np.clip(np.floor(scaled), 0, n - 1).astype(np.int64)
            frac = (scaled - base).astype(params[name].dtype)
            corners = base[:, None, :] + offsets[None]
            indices = self._indices(corners, level)
            weights = np.prod(np.where(offsets[None] == 1, frac[:, None, :],
                                       1.0 - frac[:, None, :]), axis=2)
            table = params[name]
            outputs.append(np.einsum("nc,ncf->nf", weights, table[indices]))
            cache.append((indices, weights))
        return np.concatenate(outputs, axis=1), cache

    def backward(self, params, cache, d_features):
        """Scatter feature gradients into the tables."""
        gradients = {}
        for level, name in enumerate(self.names()):
            indices, weights = cache[level]
            table = params[name]
            grad = np.zeros_like(table)
            d_level = d_features[:, level * self.features:
                                 (level + 1) * self.features]
            flat = indices.ravel()
            for f in range(self.features):
                grad[:, f] = np.bincount(
                    flat, weights=(weights * d_level[:, f:f + 1]).ravel(),
                    minlength=len(table))
            gradients[name] = grad
        return gradients


class FrequencyEncoding(object):
    """
    Positional encoding ``[x, sin(2^k pi x), cos(2^k pi x)]``.

    With 10 bands the encoding of a 3D position has 63 entries.

    """

    def __init__(self, bands):
        self.bands = bands

    @property
    def output_dim(self):
        """Width of the encoding."""
        return 3 + 6 * self.bands

    def names(self):
        return []

    def init_params(self, rng, dtype):
        return {}

    def forward(self, params, x):
        parts = [x]
        for k in range(self.bands):
            angle = (2.0 ** k) * np.pi * x
            parts.append(np.sin(angle))
            parts.append(np.cos(angle))
        return np.concatenate(parts, axis=1), None

    def backward(self, params, cache, d_features):
        return {}


class Mlp(object):
    """
    Fully connected ReLU network with a linear output layer.

    Parameters
    ----------
    prefix : str
        Prefix of the parameter names.
    sizes : Sequence[int]
        Input width, hidden widths and output width.
    residual_layer : int, optional
        Hidden layer whose output gets the previous hidden activation
        added. Default: ``None``.

    """

    def __init__(self, prefix, sizes, residual_layer=None):
        self.prefix = prefix
        self.sizes = list(sizes)
        self.residual_layer = residual_layer
        if residual_layer is not None:
            assert 1 <= residual_layer < len(self.sizes) - 2, \
                "Residual layer must be an inner hidden layer."
            assert self.sizes[residual_layer] \
                == self.sizes[residual_layer + 1], \
                "Residual layer must keep its width."

    def names(self):
        names = []
        for layer in range(len(self.sizes) - 1):
            names += ["{}.w{}".format(self.prefix, layer),
                      "{}.b{}".format(self.prefix, layer)]
        return names

    def init_params(self, rng, dtype, output_bias=0.0):
        """Kaiming-uniform weights, zero biases."""
        params = {}
        for layer, (n_in, n_out) in enumerate(zip(self.sizes[:-1],
                                                  self.sizes[1:])):
            bound = np.sqrt(6.0 / n_in)
            params["{}.w{}".format(self.prefix, layer)] = rng.uniform(
                -bound, bound, (n_in, n_out)).astype(dtype)
            params["{}.b{}".format(self.prefix, layer)] = np.zeros(
                n_out, dtype=dtype)
        last = len(self.sizes) - 2
        params["{}.b{}".format(self.prefix, last)][:] = output_bias
        return params

    def forward(self, params, x):
        activations = [x]
        pre = []
        h = x
        last = len(self.sizes) - 2
        for layer in range(last + 1):
            z = h @ params["{}.w{}".format(self.prefix, layer)] \
                + params["{}.b{}".format(self.prefix, layer)]
            pre.append(z)
            if layer == last:
                h = z
            else:
                h_next = np.maximum(z, 0.0)
                if layer == self.residual_layer:
                    h_next = h_next + h
                h = h_next
            activations.append(h)
        return h, (activations, pre)

    def backward(self, params, cache, d_out):
        """
        Returns
        -------
        gradients : dict
            Parameter gradients.
        d_input : numpy.ndarray[float]
            Gradient with respect to the network input.

        """
        activations, pre = cache
        gradients = {}
        last = len(self.sizes) - 2
        d_h = d_out
        for layer in range(last, -1, -1):
            if layer == last:
                d_z = d_h
                d_skip = 0.0
            else:
                d_z = d_h * (pre[layer] > 0)
                d_skip = d_h if layer == self.residual_layer else 0.0
            w_name = "{}.w{}".format(self.prefix, layer)
            gradients[w_name] = activations[layer].T @ d_z
            gradients["{}.b{}".format(self.prefix, layer)] = d_z.sum(axis=0)
            d_h = d_z @ params[w_name].T + d_skip
        return gradients, d_h


class _Field(object):
    """Encoding plus MLP with parameters and an AABB."""

    def __init__(self, encoding, mlp, aabb, config, output_bias=0.0):
        self.encoding = encoding
        self.mlp = mlp
        self.aabb = np.asarray(aabb, dtype=float).reshape(2, 3)
        self.config = config
        self.dtype = np.dtype(config.dtype)
        rng = np.random.default_rng([config.seed, self._seed_offset])
        self.params = encoding.init_params(rng, self.dtype)
        self.params.update(mlp.init_params(rng, self.dtype, output_bias))

    _seed_offset = 0

    def _network(self, x):
        x = np.asarray(x, dtype=self.dtype)
        features, encoding_cache = self.encoding.forward(self.params, x)
        out, mlp_cache = self.mlp.forward(self.params, features)
        return out, (encoding_cache, mlp_cache)

    def _network_backward(self, cache, d_out):
        encoding_cache, mlp_cache = cache
        gradients, d_features = self.mlp.backward(self.params, mlp_cache,
                                                  d_out)
        gradients.update(self.encoding.backward(self.params, encoding_cache,
                                                d_features))
        check_gradients(gradients)
        return gradients


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class BrdfField(_Field):
    """
    Material field predicting base color, metallic and roughness.

    Parameters
    ----------
    aabb : ArrayLike[float]
        Scene bounds used to normalize positions.
    config : FieldConfig, optional
        Architecture. Default: ``FieldConfig()``.

    """

    _seed_offset = 1

    def __init__(self, aabb, config=None):
        config = config or FieldConfig()
        if config.encoding == "hash":
            encoding = HashGridEncoding("brdf.grid", config)
        else:
            encoding = FrequencyEncoding(config.frequency_bands)
        sizes = [encoding.output_dim] + [config.brdf_hidden] \
            * config.brdf_layers + [5]
        super().__init__(encoding, Mlp("brdf.mlp", sizes), aabb, config)

    def forward(self, x):
        """
        Evaluate the field at unit-cube positions.

        Returns
        -------
        outputs : numpy.ndarray[float]
            ``(a_r, a_g, a_b, m, sigma)`` in (0, 1), shape (n, 5).
        cache : tuple
            Intermediate values for ``backward``.

        """
        z, cache = self._network(x)
        outputs = _sigmoid(z)
        return outputs, (cache, outputs)

    def backward(self, cache, d_outputs):
        """Parameter gradients for output gradients of shape (n, 5)."""
        network_cache, outputs = cache
        d_z = d_outputs * outputs * (1.0 - outputs)
        return self._network_backward(network_cache, d_z)

    def query(self, positions):
        """Return ``(a, m, sigma)`` at world positions."""
        outputs, _ = self.forward(normalize_positions(positions, self.aabb))
        outputs = outputs.astype(float)
        return outputs[:, :3], outputs[:, 3], outputs[:, 4]


class EmissionMaskField(_Field):
    """
    Emission mask field.

    The network output ``e`` is mapped to ``alpha = 1 - exp(-relu(e))``,
    so ``alpha`` is zero exactly where ``e <= 0``. The last bias starts
    at ``config.mask_output_bias`` to begin with a mostly empty mask.

    Parameters
    ----------
    aabb : ArrayLike[float]
        Scene bounds used to normalize positions.
    config : FieldConfig, optional
        Architecture. Default: ``FieldConfig()``.

    """

    _seed_offset = 2

    def __init__(self, aabb, config=None):
        config = config or FieldConfig()
        encoding = FrequencyEncoding(config.frequency_bands)
        sizes = [encoding.output_dim] + [config.mask_hidden] \
            * config.mask_layers + [1]
        mlp = Mlp("mask.mlp", sizes, residual_layer=config.mask_layers // 2)
        super().__init__(encoding, mlp, aabb, config,
                         config.mask_output_bias)

    def forward(self, x):
        """
        Evaluate the mask at unit-cube positions.

        Returns
        -------
        alpha : numpy.ndarray[float]
            Mask values in [0, 1), shape (n,).
        e : numpy.ndarray[float]
            Pre-activations, shape (n,).
        cache : tuple
            Intermediate values for ``backward``.

        """
        out, cache = self._network(x)
        e = out[:, 0]
        alpha = 1.0 - np.exp(-np.maximum(e, 0.0))
        return alpha, e, (cache, e)

    def backward(self, cache, d_alpha, d_e=None):
        """Parameter gradients for gradients of ``alpha`` and ``e``."""
        network_cache, e = cache
        d_total = np.where(e > 0, np.exp(-np.maximum(e, 0.0)), 0.0) \
            * d_alpha
        if d_e is not None:
            d_total = d_total + d_e
        return self._network_backward(network_cache, d_total[:, None])

    def alpha(self, positions):
        """Mask values at world positions."""
        return self.forward(normalize_positions(positions, self.aabb))[0] \
            .astype(float)


class SceneFields(object):
    """
    The material field, the emission mask and the loss history.

    Parameters
    ----------
    aabb : ArrayLike[float]
        Scene bounds.
    config : FieldConfig, optional
        Architecture. Default: ``FieldConfig()``.

    """

    def __init__(self, aabb, config=None):
        self.config = config or FieldConfig()
        self.aabb = np.asarray(aabb, dtype=float).reshape(2, 3)
        self.brdf = BrdfField(self.aabb, self.config)
        self.mask = EmissionMaskField(self.aabb, self.config)
        # per-triangle log emission, only set by joint emission fitting
        self.log_emission = None
        self.loss_history = []

    @property
    def params(self):
        """All parameters, keyed by block name."""
        params = dict(self.brdf.params)
        params.update(self.mask.params)
        if self.log_emission is not None:
            params[JOINT_EMISSION_BLOCK] = self.log_emission
        return params

    def joint_emission(self):
        """Per-triangle emission of the joint fit, or ``None``."""
        if self.log_emission is None:
            return None
        return np.exp(self.log_emission.astype(float))

    def save(self, file_name):
        """
        Write a checkpoint.

        Layout: magic bytes, header length (u32), a JSON header with the
        architecture, AABB and parameter shapes, then all parameters as
        little-endian float32 in sorted name order.

        """
        params = self.params
        names = sorted(params)
        header = json.dumps({"config": self.config.to_dict(),
                             "aabb": self.aabb.tolist(),
                             "loss_history": self.loss_history,
                             "shapes": {n: list(params[n].shape)
                                        for n in names}},
                            sort_keys=True).encode("utf-8")
        with FileManager(file_name, "wb") as checkpoint:
            checkpoint.write(CHECKPOINT_MAGIC)
            checkpoint.write(struct.pack(FILE_BYTE_ORDER_CHAR + "I",
                                         len(header)))
            checkpoint.write(header)
            for name in names:
                checkpoint.write(np.ascontiguousarray(
                    params[name], dtype=FILE_BYTE_ORDER_CHAR + "f4")
                    .tobytes())

    @classmethod
    def load(cls, file_name):
        """Read a checkpoint written by ``save``."""
        with FileManager(file_name, "rb") as checkpoint:
            raw = checkpoint.read()
        if raw[:8] != CHECKPOINT_MAGIC:
            msg = "'{}' is not a fipt checkpoint.".format(file_name)
            raise ValueError(msg)
        length, = struct.unpack_from(FILE_BYTE_ORDER_CHAR + "I", raw, 8)
        header = json.loads(raw[12:12 + length].decode("utf-8"))

        fields = cls(header["aabb"], FieldConfig.from_dict(header["config"]))
        fields.loss_history = list(header.get("loss_history", []))
        offset = 12 + length
        for name in sorted(header["shapes"]):
            shape = tuple(header["shapes"][name])
            size = int(np.prod(shape))
            values = np.frombuffer(raw, dtype=FILE_BYTE_ORDER_CHAR + "f4",
                                   count=size, offset=offset)
            offset += 4 * size
            if name == JOINT_EMISSION_BLOCK:
                fields.log_emission = values.reshape(shape).astype(
                    fields.brdf.dtype)
                continue
            target = fields.brdf.params if name.startswith("brdf.") \
                else fields.mask.params
            if name not in target or target[name].shape != shape:
                msg = "Checkpoint block '{}' does not match the " \
                    "architecture.".format(name)
                raise ValueError(msg)
            target[name] = values.reshape(shape).astype(fields.brdf.dtype)
        if offset != len(raw):
            raise ValueError("Checkpoint '{}' has trailing data."
                             .format(file_name))
        return fields
