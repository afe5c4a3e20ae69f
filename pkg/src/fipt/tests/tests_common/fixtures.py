"""
Common fixtures for tests in tests_common.

"""
import functools

import numpy as np

from fipt.fields import FieldConfig
from fipt.geometry import build_bvh
from fipt.radiancecache import build_cache
from fipt.renderer import RenderConfig, path_trace
from fipt.scene import Camera, Scene, TriangleMesh
from fipt.shading import BakeConfig, bake_initial
from fipt.synthetic import GtSceneSpec, build_synthetic


def get_test_spec(**overrides):
    """A small room rendered at a tiny resolution."""
    options = {"room": [2.0, 2.0, 2.0],
               "subdivisions": 2,
               "number_of_views": 2,
               "width": 12,
               "height": 10,
               "trajectory": "orbit",
               "spp": 2,
               "max_depth": 3,
               "albedo_spp": 4,
               "seed": 0}
    options.update(overrides)
    return GtSceneSpec(**options)


@functools.lru_cache(maxsize=None)
def get_test_truth():
    """Geometry and ground truth of the test room."""
    return build_synthetic(get_test_spec())


@functools.lru_cache(maxsize=None)
def get_test_scene():
    """The test room with path traced frames."""
    truth = get_test_truth()
    bvh = build_bvh(truth.mesh)
    config = RenderConfig(spp=2, max_depth=3)
    frames = [path_trace(truth.mesh, truth.materials, truth.emitters, camera,
                         config, bvh, stream=view)
              for view, camera in enumerate(truth.cameras)]
    return Scene(truth.mesh, truth.cameras, frames, truth.part_labels,
                 truth.semantic_labels)


@functools.lru_cache(maxsize=None)
def get_test_shadings():
    """Initial shadings of the test room at a few samples per pixel."""
    scene = get_test_scene()
    bvh = build_bvh(scene.mesh)
    cache = build_cache(scene, bvh, resolution=16)
    config = BakeConfig(spp_diffuse=2, spp_specular=1, denoise=False)
    return bake_initial(scene, bvh, cache, config)


def get_small_field_config(**overrides):
    """Field architecture small enough for finite differences."""
    options = {"levels": 2,
               "base_resolution": 2,
               "features": 2,
               "log2_table_size": 6,
               "brdf_hidden": 8,
               "brdf_layers": 2,
               "frequency_bands": 2,
               "mask_hidden": 8,
               "mask_layers": 2,
               "dtype": "float64"}
    options.update(overrides)
    return FieldConfig(**options)


def get_test_quad():
    """Unit square in the plane z = 0 facing +z, made of two triangles."""
    vertices = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    normals = [[0, 0, 1]] * 4
    triangles = [[0, 1, 2], [0, 2, 3]]
    return TriangleMesh(vertices, normals, triangles)


def get_test_camera(width=8, height=6):
    """Camera one meter above the unit square, looking down."""
    return Camera.look_at([0.5, 0.5, 1.0], [0.5, 0.5, 0.0], 10.0, 10.0,
                          width, height)


def get_quad_scene(radiance=0.5):
    """The unit square seen by one camera with constant radiance."""
    camera = get_test_camera()
    frame = np.full((camera.height, camera.width, 3), radiance)
    return Scene(get_test_quad(), [camera], [frame], part_labels=[1, 2],
                 semantic_labels=[3, 3])
