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
Voxelized, view-independent surface radiance built by average pooling
the input pixels onto the surface points they observe.

Only occupied voxels are stored, as a sorted array of linear voxel keys
with matching radiance values.

"""
import logging
import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from fipt.constants import FILE_BYTE_ORDER_CHAR
from fipt.fileio import FileManager
from fipt.geometry import camera_rays, intersect

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256
SEARCH_RADIUS = 3
CACHE_MAGIC = b"FIPTRC01"


def _search_offsets(radius):
    """Voxel offsets around the origin, nearest first."""
    r = np.arange(-radius, radius + 1)
    offsets = np.stack(np.meshgrid(r, r, r, indexing="ij"),
                       axis=-1).reshape(-1, 3)
    offsets = offsets[np.any(offsets != 0, axis=1)]
    distance = np.sum(offsets ** 2, axis=1)
    order = np.lexsort((offsets[:, 2], offsets[:, 1], offsets[:, 0],
                        distance))
    return offsets[order]


_OFFSETS = _search_offsets(SEARCH_RADIUS)


def voxel_indices(positions, aabb, resolution):
    """Integer voxel coordinates of positions, clamped to the grid."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    lower, upper = np.asarray(aabb, dtype=float).reshape(2, 3)
    scaled = (positions - lower) / (upper - lower) * resolution
    return np.clip(np.floor(scaled), 0, resolution - 1).astype(np.int64)


def linear_keys(indices, resolution):
    """Linear voxel keys ``(i * N + j) * N + k``."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    return ((indices[:, 0] * resolution + indices[:, 1]) * resolution
            + indices[:, 2]).astype(np.uint64)


class RadianceCache(object):
    """
    Sparse voxel grid of mean surface radiance.

    Parameters
    ----------
    resolution : int
        Number of voxels per axis.
    aabb : ArrayLike[float]
        Grid bounds ``[[x0, y0, z0], [x1, y1, z1]]``.
    keys : ArrayLike[int]
        Sorted linear keys ``(i * N + j) * N + k`` of occupied voxels.
    values : ArrayLike[float]
        Mean RGB radiance per occupied voxel.
    counts : ArrayLike[int], optional
        Number of pooled pixels per occupied voxel.

    """

    def __init__(self, resolution, aabb, keys, values, counts=None,
                 pooled_pixels=None):
        self._resolution = int(resolution)
        self._aabb = np.asarray(aabb, dtype=float).reshape(2, 3)
        self._keys = np.asarray(keys, dtype=np.uint64)
        self._values = np.asarray(values, dtype=np.float32).reshape(-1, 3)
        self._counts = None if counts is None \
            else np.asarray(counts, dtype=np.int64)
        if pooled_pixels is None and self._counts is not None:
            pooled_pixels = int(self._counts.sum())
        self._pooled_pixels = None if pooled_pixels is None \
            else int(pooled_pixels)

        assert np.all(self._keys[1:] > self._keys[:-1]), \
            "Voxel keys must be unique and sorted."
        assert len(self._keys) == len(self._values), \
            "Every voxel key needs a value."

    @property
    def resolution(self):
        """Number of voxels per axis."""
        return self._resolution

    @property
    def aabb(self):
        """Grid bounds."""
        return self._aabb

    @property
    def keys(self):
        """Linear keys of occupied voxels."""
        return self._keys

    @property
    def values(self):
        """Mean radiance of occupied voxels."""
        return self._values

    @property
    def counts(self):
        """Pooled pixels per occupied voxel, if known."""
        return self._counts

    def __len__(self):
        return len(self._keys)

    def __repr__(self):
        return "RadianceCache({}^3, {} occupied voxels)".format(
            self._resolution, len(self._keys))

    def stats(self):
        """Return occupied voxel and pooled pixel counts."""
        return {"resolution": self._resolution,
                "occupied_voxels": len(self._keys),
                "pooled_pixels": self._pooled_pixels}

    def voxel_indices(self, positions):
        """Integer voxel coordinates, clamped to the grid."""
        return voxel_indices(positions, self._aabb, self._resolution)

    def _linear(self, indices):
        return linear_keys(indices, self._resolution)

    def _lookup(self, keys):
        slots = np.searchsorted(self._keys, keys)
        slots = np.minimum(slots, max(len(self._keys) - 1, 0))
        found = self._keys[slots] == keys if len(self._keys) \
            else np.zeros(len(keys), dtype=bool)
        return slots, found

    def query(self, positions):
        """
        Look up radiance at world positions.

        The containing voxel is used if it is occupied. Otherwise the
        nearest occupied voxel within a cube of 3 voxels is used, in
        order of increasing distance and lexicographic offset. Positions
        outside the grid are clamped.

        Parameters
        ----------
        positions : ArrayLike[float]
            Query positions, shape (n, 3).

        Returns
        -------
        values : numpy.ndarray[float32]
            RGB radiance, zero where nothing was found.
        found : numpy.ndarray[bool]
            ``False`` for misses.

        """
        indices = self.voxel_indices(positions)
        values = np.zeros((len(indices), 3), dtype=np.float32)

        slots, found = self._lookup(self._linear(indices))
        values[found] = self._values[slots[found]]

        pending = np.flatnonzero(~found)
        for offset in _OFFSETS:
            if pending.size == 0:
                break
            neighbors = indices[pending] + offset
            inside = np.all((neighbors >= 0)
                            & (neighbors < self._resolution), axis=1)
            slots, hit = self._lookup(self._linear(
                np.clip(neighbors, 0, self._resolution - 1)))
            hit &= inside
            values[pending[hit]] = self._values[slots[hit]]
            found[pending[hit]] = True
            pending = pending[~hit]

        return values, found

    def save(self, file_name):
        """
        Write the cache as a little-endian binary dump.

        The header holds the magic bytes, the resolution (u32), the
        bounds (6 x f64), the number of records (u64) and the number of
        pooled pixels (u64). Each record is a voxel key (u64) followed
        by RGB (3 x f32).

        """
        bo = FILE_BYTE_ORDER_CHAR
        record = np.dtype([("key", bo + "u8"), ("rgb", bo + "f4", (3,))])
        records = np.empty(len(self._keys), dtype=record)
        records["key"] = self._keys
        records["rgb"] = self._values
        pooled = self._pooled_pixels or 0

        with FileManager(file_name, "wb") as cache_file:
            cache_file.write(CACHE_MAGIC)
            cache_file.write(struct.pack(bo + "I", self._resolution))
            cache_file.write(struct.pack(bo + "6d", *self._aabb.ravel()))
            cache_file.write(struct.pack(bo + "QQ", len(self._keys), pooled))
            cache_file.write(records.tobytes())

    @classmethod
    def load(cls, file_name):
        """Read a cache written by ``save``."""
        bo = FILE_BYTE_ORDER_CHAR
        with FileManager(file_name, "rb") as cache_file:
            raw = cache_file.read()

        if raw[:8] != CACHE_MAGIC:
            msg = "'{}' is not a radiance cache file.".format(file_name)
            raise ValueError(msg)
        resolution, = struct.unpack_from(bo + "I", raw, 8)
        aabb = struct.unpack_from(bo + "6d", raw, 12)
        count, pooled = struct.unpack_from(bo + "QQ", raw, 60)

        record = np.dtype([("key", bo + "u8"), ("rgb", bo + "f4", (3,))])
        payload = raw[76:]
        if len(payload) != count * record.itemsize:
            msg = "Truncated radiance cache file '{}'.".format(file_name)
            raise ValueError(msg)
        records = np.frombuffer(payload, dtype=record)

        return cls(resolution, aabb, records["key"], records["rgb"],
                   pooled_pixels=pooled)


def _pool_view(scene, bvh, view, resolution):
    """Voxel keys and float64 radiance sums of one view."""
    camera = scene.cameras[view]
    hits = intersect(bvh, scene.mesh, camera_rays(camera))
    observed = hits.valid
    radiance = scene.frames[view].data.reshape(-1, 3)[observed]

    keys = linear_keys(voxel_indices(hits.positions[observed], scene.aabb,
                                     resolution), resolution)

    unique, inverse = np.unique(keys, return_inverse=True)
    sums = np.stack([np.bincount(inverse, weights=radiance[:, c]
                                 .astype(np.float64),
                                 minlength=len(unique)) for c in range(3)],
                    axis=1)
    counts = np.bincount(inverse, minlength=len(unique))
    return unique, sums, counts


def build_cache(scene, bvh, resolution=DEFAULT_RESOLUTION, workers=1):
    """
    Average pool all input pixels onto the voxels their primary rays hit.

    Each view is pooled into float64 partial sums; partials are merged
    in view order and finalized to float32 means.

    Parameters
    ----------
    scene : Scene
        The input captures.
    bvh : Bvh
        Hierarchy of the scene mesh.
    resolution : int, optional
        Voxels per axis. Default: ``256``.
    workers : int, optional
        Number of threads pooling views in parallel. Default: ``1``.

    Returns
    -------
    RadianceCache
        The finalized cache.

    """
    views = range(scene.number_of_views)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            partials = list(executor.map(
                lambda v: _pool_view(scene, bvh, v, resolution), views))
    else:
        partials = [_pool_view(scene, bvh, v, resolution) for v in views]

    keys = np.concatenate([p[0] for p in partials])
    if keys.size == 0:
        raise ValueError("Radiance cache is empty: no input pixel hits "
                         "the scene geometry.")
    sums = np.concatenate([p[1] for p in partials])
    counts = np.concatenate([p[2] for p in partials])

    unique, inverse = np.unique(keys, return_inverse=True)
    total = np.stack([np.bincount(inverse, weights=sums[:, c],
                                  minlength=len(unique)) for c in range(3)],
                     axis=1)
    total_counts = np.bincount(inverse, weights=counts,
                               minlength=len(unique)).astype(np.int64)

    cache = RadianceCache(resolution, scene.aabb, unique,
                          (total / total_counts[:, None]).astype(np.float32),
                          total_counts)
    logger.info("built %r from %d pixels", cache, int(total_counts.sum()))
    return cache
