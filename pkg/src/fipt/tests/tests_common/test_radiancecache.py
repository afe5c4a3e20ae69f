"""
Tests for the voxel radiance cache.

"""
import os
import shutil
import tempfile
import unittest

import numpy as np

from fipt.geometry import build_bvh, render_triangle_ids
from fipt.radiancecache import (RadianceCache, build_cache, linear_keys,
                                voxel_indices)
from fipt.tests.tests_common.fixtures import get_quad_scene, get_test_scene

AABB = [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]


def _cache(entries, resolution=10):
    """Cache with radiance values at the given voxel coordinates."""
    keys = linear_keys([e[0] for e in entries], resolution)
    order = np.argsort(keys)
    values = np.array([e[1] for e in entries], dtype=float)
    return RadianceCache(resolution, AABB, keys[order], values[order])


class TestQuery(unittest.TestCase):
    """Tests for radiance lookups."""

    def test_occupied_voxel(self):
        """A query inside an occupied voxel returns its value."""
        cache = _cache([((2, 3, 4), (1.0, 2.0, 3.0))])

        values, found = cache.query([[0.25, 0.35, 0.45]])

        assert found[0]
        assert np.allclose(values[0], [1.0, 2.0, 3.0])

    def test_nearest_neighbor_fallback(self):
        """Empty voxels use the nearest occupied voxel in reach."""
        cache = _cache([((5, 5, 5), (1.0, 1.0, 1.0)),
                        ((5, 5, 7), (2.0, 2.0, 2.0))])

        values, found = cache.query([[0.55, 0.55, 0.65]])

        assert found[0]
        assert np.allclose(values[0], 1.0)

    def test_lexicographic_tie_break(self):
        """Equidistant neighbors are picked in lexicographic offset order."""
        cache = _cache([((4, 5, 5), (1.0, 1.0, 1.0)),
                        ((6, 5, 5), (2.0, 2.0, 2.0))])

        values, _ = cache.query([[0.55, 0.55, 0.55]])

        assert np.allclose(values[0], 1.0)

    def test_miss(self):
        """Nothing within reach is a miss with zero radiance."""
        cache = _cache([((0, 0, 0), (1.0, 1.0, 1.0))])

        values, found = cache.query([[0.95, 0.95, 0.95]])

        assert not found[0]
        assert np.all(values[0] == 0)

    def test_positions_are_clamped(self):
        """Positions outside the grid use the border voxels."""
        assert np.array_equal(voxel_indices([[-1.0, 0.5, 2.0]], AABB, 10),
                              [[0, 5, 9]])

    def test_empty_cache(self):
        """An empty cache misses every query."""
        cache = RadianceCache(4, AABB, [], np.zeros((0, 3)))

        values, found = cache.query([[0.5, 0.5, 0.5]])

        assert not found[0] and np.all(values == 0)


class TestBuildCache(unittest.TestCase):
    """Tests for pooling the input pixels."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_constant_frames(self):
        """Constant input radiance gives a constant cache."""
        scene = get_quad_scene(radiance=0.5)

        cache = build_cache(scene, build_bvh(scene.mesh), resolution=8)

        assert np.allclose(cache.values, 0.5)
        assert cache.stats()["pooled_pixels"] == 48

    def test_all_hit_pixels_are_pooled(self):
        """Every pixel with a primary hit contributes once."""
        scene = get_test_scene()
        bvh = build_bvh(scene.mesh)
        hits = sum(int(np.count_nonzero(
            render_triangle_ids(bvh, scene.mesh, camera) >= 0))
            for camera in scene.cameras)

        cache = build_cache(scene, bvh, resolution=16)

        assert int(cache.counts.sum()) == hits
        assert np.all(cache.keys[1:] > cache.keys[:-1])

    def test_threads_do_not_change_the_result(self):
        """Pooling views in parallel gives the same cache."""
        scene = get_test_scene()
        bvh = build_bvh(scene.mesh)

        serial = build_cache(scene, bvh, resolution=16)
        parallel = build_cache(scene, bvh, resolution=16, workers=2)

        assert np.array_equal(serial.keys, parallel.keys)
        assert np.array_equal(serial.values, parallel.values)

    def test_save_and_load(self):
        """A saved cache loads bit-identically."""
        scene = get_test_scene()
        cache = build_cache(scene, build_bvh(scene.mesh), resolution=16)
        file_name = os.path.join(self.folder, "cache.bin")

        cache.save(file_name)
        loaded = RadianceCache.load(file_name)

        assert loaded.resolution == 16
        assert np.array_equal(loaded.keys, cache.keys)
        assert np.array_equal(loaded.values, cache.values)
        assert np.allclose(loaded.aabb, cache.aabb)
        assert loaded.stats() == cache.stats()

    def test_bad_magic(self):
        """Files without the cache magic are rejected."""
        file_name = os.path.join(self.folder, "cache.bin")
        with open(file_name, "wb") as cache_file:
            cache_file.write(b"NOTACACHE" + b"\x00" * 64)

        with self.assertRaises(ValueError):
            RadianceCache.load(file_name)
