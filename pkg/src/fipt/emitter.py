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
Emitters: triangle area lights with constant radiance and an optional
equirectangular environment seen by escaping rays.

Emitter triangles are classified by thresholding the optimized emission
mask, and their radiance is solved in closed form as the per-channel
median of all input pixels that observe them. Emitters are assumed to
reflect no light.

"""
import logging
import warnings
from os import path

import numpy as np

from fipt import fileio
from fipt.brdf import luminance
from fipt.constants import (EMITTER_ALPHA_THRESHOLD,
                            EMITTER_SAMPLES_PER_TRIANGLE)
from fipt.geometry import camera_rays, intersect, sample_triangle

logger = logging.getLogger(__name__)


class EnvironmentMap(object):
    """
    Equirectangular radiance map, y is up.

    A direction ``d`` maps to ``theta = arccos(d_y)`` (rows, top row
    looks up) and ``phi = atan2(d_z, d_x)`` (columns, from -pi to pi).

    Parameters
    ----------
    data : ArrayLike[float]
        RGB radiance of shape (height, 2 * height, 3).

    """

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError("Environment data must have shape (H, W, 3).")
        if np.any(~np.isfinite(data)) or np.any(data < 0):
            raise ValueError("Environment radiance must be finite and >= 0.")
        self._data = data

    @property
    def data(self):
        """RGB radiance per texel."""
        return self._data

    @property
    def height(self):
        """Number of texel rows."""
        return self._data.shape[0]

    @property
    def width(self):
        """Number of texel columns."""
        return self._data.shape[1]

    @classmethod
    def constant(cls, radiance, height=8):
        """Environment with the same radiance in every direction."""
        data = np.empty((height, 2 * height, 3), dtype=np.float32)
        data[:] = np.asarray(radiance, dtype=np.float32)
        return cls(data)

    def texels(self, directions):
        """Row and column of the texels containing unit directions."""
        directions = np.atleast_2d(directions)
        theta = np.arccos(np.clip(directions[:, 1], -1.0, 1.0))
        phi = np.arctan2(directions[:, 2], directions[:, 0])
        rows = np.clip((theta / np.pi * self.height).astype(np.int64), 0,
                       self.height - 1)
        cols = np.clip(((phi + np.pi) / (2.0 * np.pi) * self.width)
                       .astype(np.int64), 0, self.width - 1)
        return rows, cols

    def lookup(self, directions):
        """Radiance arriving from unit directions."""
        rows, cols = self.texels(directions)
        return self._data[rows, cols].astype(float)


class EmitterSet(object):
    """
    Emitting triangles with constant radiance and an optional
    environment map.

    Parameters
    ----------
    triangles : ArrayLike[int]
        Indices of emitting triangles.
    radiance : ArrayLike[float]
        RGB radiance per emitting triangle, shape (k, 3).
    environment : EnvironmentMap, optional
        Radiance of escaping rays. Default: ``None``, escaping rays see
        no light.
    number_of_triangles : int, optional
        If given, triangle indices are checked against it.

    """

    def __init__(self, triangles, radiance, environment=None,
                 number_of_triangles=None):
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1)
        radiance = np.asarray(radiance, dtype=float).reshape(-1, 3)
        if len(triangles) != len(radiance):
            msg = "Got {} emitter triangles but {} radiance values.".format(
                len(triangles), len(radiance))
            raise ValueError(msg)
        if np.any(~np.isfinite(radiance)) or np.any(radiance < 0):
            raise ValueError("Emitted radiance must be finite and >= 0.")
        if len(np.unique(triangles)) != len(triangles):
            raise ValueError("Emitter triangles must be unique.")
        if number_of_triangles is not None and triangles.size and (
                triangles.min() < 0 or triangles.max() >= number_of_triangles):
            msg = "Emitter triangle index out of range for a mesh with {} " \
                "triangles.".format(number_of_triangles)
            raise ValueError(msg)

        order = np.argsort(triangles)
        self._triangles = triangles[order]
        self._radiance = radiance[order]
        self._environment = environment

    @property
    def triangles(self):
        """Sorted indices of emitting triangles."""
        return self._triangles

    @property
    def radiance(self):
        """RGB radiance per emitting triangle."""
        return self._radiance

    @property
    def environment(self):
        """Environment map or ``None``."""
        return self._environment

    def __len__(self):
        return len(self._triangles)

    def __repr__(self):
        return "EmitterSet({} triangles{})".format(
            len(self._triangles),
            ", environment" if self._environment is not None else "")

    def with_environment(self, environment):
        """Return a copy with a different environment map."""
        return EmitterSet(self._triangles, self._radiance, environment)

    def moved(self, triangles):
        """Return a copy whose radiance sits on other triangles."""
        return EmitterSet(triangles, self._radiance, self._environment)

    def _slots(self, triangle_ids):
        triangle_ids = np.asarray(triangle_ids, dtype=np.int64)
        if len(self._triangles) == 0:
            return (np.zeros(triangle_ids.shape, dtype=np.int64),
                    np.zeros(triangle_ids.shape, dtype=bool))
        slots = np.minimum(np.searchsorted(self._triangles, triangle_ids),
                           len(self._triangles) - 1)
        return slots, self._triangles[slots] == triangle_ids

    def is_emitter(self, triangle_ids):
        """Mask of triangles that emit."""
        return self._slots(triangle_ids)[1]

    def emission(self, triangle_ids):
        """Emitted radiance per triangle, zero for non-emitters."""
        slots, found = self._slots(triangle_ids)
        values = np.zeros(np.shape(triangle_ids) + (3,))
        values[found] = self._radiance[slots[found]]
        return values

    def escape_radiance(self, directions):
        """Radiance seen by rays leaving the scene."""
        if self._environment is None:
            return np.zeros((len(directions), 3))
        return self._environment.lookup(directions)

    def _selection_weights(self, mesh):
        return mesh.areas[self._triangles] * luminance(self._radiance)

    def can_sample(self, mesh):
        """``True`` if some triangle emits a positive power."""
        return len(self) > 0 and self._selection_weights(mesh).sum() > 0

    def sample_points(self, mesh, u):
        """
        Sample points on emitters for next-event estimation.

        A triangle is chosen with probability proportional to its area
        times the luminance of its radiance, then a point is sampled
        uniformly on it.

        Parameters
        ----------
        mesh : TriangleMesh
            The scene geometry.
        u : numpy.ndarray[float]
            Uniform numbers, shape (n, 3).

        Returns
        -------
        positions : numpy.ndarray[float]
            Sampled points.
        triangles : numpy.ndarray[int]
            Sampled emitter triangles.
        pdf_area : numpy.ndarray[float]
            Density with respect to surface area.

        """
        weights = self._selection_weights(mesh)
        cdf = np.cumsum(weights)
        total = cdf[-1]
        slots = np.minimum(np.searchsorted(cdf, u[:, 0] * total,
                                           side="right"), len(cdf) - 1)
        triangles = self._triangles[slots]
        positions = sample_triangle(mesh.corners[triangles], u[:, 1:3])
        pdf_area = weights[slots] / total / mesh.areas[triangles]
        return positions, triangles, pdf_area

    def pdf_area(self, mesh, triangle_ids):
        """Area density of ``sample_points`` at points on triangles."""
        slots, found = self._slots(triangle_ids)
        weights = self._selection_weights(mesh)
        total = weights.sum() if len(weights) else 0.0
        if total <= 0:
            return np.zeros(np.shape(triangle_ids))
        density = weights[slots] / total / mesh.areas[
            np.asarray(triangle_ids)]
        return np.where(found, density, 0.0)

    def to_list(self):
        """Entries of ``emitters.json``."""
        return [{"tri": int(t), "Le": [float(c) for c in le]}
                for t, le in zip(self._triangles, self._radiance)]


def classify(mesh, mask_field, samples_per_triangle=EMITTER_SAMPLES_PER_TRIANGLE,
             threshold=EMITTER_ALPHA_THRESHOLD, seed=0, chunk_size=4096):
    """
    Classify emitting triangles from the emission mask.

    Parameters
    ----------
    mesh : TriangleMesh
        The scene geometry.
    mask_field : EmissionMaskField
        Optimized emission mask.
    samples_per_triangle : int, optional
        Uniform samples per triangle. Default: ``100``.
    threshold : float, optional
        A triangle emits if its mean mask value exceeds this. Default:
        ``0.01``.
    seed : int, optional
        Seed of the sample positions. Default: ``0``.

    Returns
    -------
    numpy.ndarray[int]
        Sorted indices of emitting triangles.

    """
    rng = np.random.default_rng(seed)
    number_of_triangles = len(mesh.triangles)
    mean_alpha = np.empty(number_of_triangles)

    for begin in range(0, number_of_triangles, chunk_size):
        ids = np.arange(begin, min(number_of_triangles, begin + chunk_size))
        u = rng.random((len(ids) * samples_per_triangle, 2))
        corners = np.repeat(mesh.corners[ids], samples_per_triangle, axis=0)
        alpha = mask_field.alpha(sample_triangle(corners, u))
        mean_alpha[ids] = alpha.reshape(len(ids), samples_per_triangle) \
            .mean(axis=1)

    emitters = np.flatnonzero(mean_alpha > threshold)
    logger.info("classified %d of %d triangles as emitters", emitters.size,
                number_of_triangles)
    return emitters


def _gather_pixels(scene, bvh):
    """Primary-hit triangle and radiance of all input pixels."""
    for camera, frame in zip(scene.cameras, scene.frames):
        rays = camera_rays(camera)
        hits = intersect(bvh, scene.mesh, rays)
        yield hits, rays, frame.data.reshape(-1, 3).astype(float)


def _grouped_median(keys, values):
    """Per-channel median of ``values`` for every distinct key."""
    order = np.argsort(keys, kind="stable")
    keys, values = keys[order], values[order]
    unique, starts = np.unique(keys, return_index=True)
    ends = np.append(starts[1:], len(keys))
    medians = np.array([np.median(values[s:e], axis=0)
                        for s, e in zip(starts, ends)]).reshape(-1, 3)
    return unique, medians


def solve_emission(scene, bvh, emitter_triangles):
    """
    Solve the radiance of emitting triangles.

    Every input pixel whose primary ray hits an emitter votes with its
    RGB value; the per-channel median is used, which minimizes the L1
    error against the observations and is robust to outliers such as
    glare. Unobserved emitters get zero radiance.

    Parameters
    ----------
    scene : Scene
        The input captures.
    bvh : Bvh
        Hierarchy of the scene mesh.
    emitter_triangles : ArrayLike[int]
        Classified emitter triangles.

    Returns
    -------
    numpy.ndarray[float]
        RGB radiance per emitter triangle, shape (k, 3).

    """
    emitter_triangles = np.asarray(emitter_triangles, dtype=np.int64)
    radiance = np.zeros((len(emitter_triangles), 3))
    if emitter_triangles.size == 0:
        return radiance

    slot_of = np.full(len(scene.mesh), -1, dtype=np.int64)
    slot_of[emitter_triangles] = np.arange(len(emitter_triangles))

    keys, values = [], []
    for hits, _, pixels in _gather_pixels(scene, bvh):
        observed = hits.valid
        observed[observed] = slot_of[hits.triangles[observed]] >= 0
        keys.append(hits.triangles[observed])
        values.append(pixels[observed])

    keys = np.concatenate(keys)
    values = np.concatenate(values).reshape(-1, 3)
    if keys.size:
        unique, medians = _grouped_median(keys, values)
        radiance[slot_of[unique]] = medians
    else:
        unique = np.zeros(0, dtype=np.int64)

    unobserved = np.setdiff1d(emitter_triangles, unique)
    if unobserved.size:
        msg = "{} emitter triangles are not observed by any pixel and get " \
            "zero radiance, e.g. triangle {}.".format(unobserved.size,
                                                      unobserved[0])
        warnings.warn(msg)
    return radiance


def solve_environment(scene, bvh, resolution=16):
    """
    Solve an environment map from pixels whose primary rays escape.

    Each texel holds the per-channel median of the pixels whose ray
    directions fall into it; unobserved texels are zero.

    Parameters
    ----------
    scene : Scene
        The input captures.
    bvh : Bvh
        Hierarchy of the scene mesh.
    resolution : int, optional
        Number of texel rows; the map has twice as many columns.
        Default: ``16``.

    Returns
    -------
    EnvironmentMap
        The solved map.

    """
    environment = EnvironmentMap(np.zeros((resolution, 2 * resolution, 3)))
    keys, values = [], []
    for hits, rays, pixels in _gather_pixels(scene, bvh):
        escaped = ~hits.valid
        rows, cols = environment.texels(rays.directions[escaped])
        keys.append(rows * environment.width + cols)
        values.append(pixels[escaped])

    keys = np.concatenate(keys)
    if keys.size == 0:
        return environment

    unique, medians = _grouped_median(keys,
                                      np.concatenate(values).reshape(-1, 3))
    data = np.zeros((resolution * 2 * resolution, 3))
    data[unique] = medians
    logger.info("environment: %d of %d texels observed", unique.size,
                data.shape[0])
    return EnvironmentMap(data.reshape(resolution, 2 * resolution, 3))


def extract_emitters(scene, bvh, mask_field, seed=0,
                     samples_per_triangle=EMITTER_SAMPLES_PER_TRIANGLE,
                     threshold=EMITTER_ALPHA_THRESHOLD,
                     environment_resolution=None):
    """
    Classify emitters from the mask and solve their radiance.

    Parameters
    ----------
    environment_resolution : int, optional
        If given, an environment map of this many rows is solved from
        escaping pixels as well.

    Returns
    -------
    EmitterSet
        The extracted emitters.

    """
    triangles = classify(scene.mesh, mask_field, samples_per_triangle,
                         threshold, seed)
    radiance = solve_emission(scene, bvh, triangles)
    environment = None
    if environment_resolution:
        environment = solve_environment(scene, bvh, environment_resolution)
    return EmitterSet(triangles, radiance, environment, len(scene.mesh))


def save_emitters(emitters, folder):
    """Write ``emitters.json`` and, if present, ``env.pfm``."""
    fileio.write_json(path.join(folder, "emitters.json"), emitters.to_list())
    if emitters.environment is not None:
        fileio.write_pfm(emitters.environment.data,
                         path.join(folder, "env.pfm"))


def load_emitters(file_name):
    """
    Read emitters from ``emitters.json``.

    An ``env.pfm`` next to the JSON file is loaded as environment.

    """
    entries = fileio.read_json(file_name)
    try:
        triangles = [entry["tri"] for entry in entries]
        radiance = [entry["Le"] for entry in entries]
    except (KeyError, TypeError) as error:
        msg = "Malformed emitter file '{}': {}".format(file_name, error)
        raise ValueError(msg)

    environment = None
    env_file = path.join(path.dirname(path.abspath(file_name)), "env.pfm")
    if path.isfile(env_file):
        environment = EnvironmentMap(fileio.read_pfm(env_file).data)
    return EmitterSet(triangles, np.reshape(radiance, (-1, 3)), environment)
