"""
Tests for meshes, cameras and scene loading.

"""
import os
import shutil
import tempfile
import unittest

import numpy as np

from fipt import fileio
from fipt.geometry import build_bvh, render_triangle_ids
from fipt.scene import (Camera, Scene, TriangleMesh, fuse_segmentation,
                        load_scene, save_scene)
from fipt.tests.tests_common.fixtures import (get_quad_scene,
                                              get_test_camera,
                                              get_test_quad, get_test_scene)


class TestTriangleMesh(unittest.TestCase):
    """Tests for mesh validation."""

    def test_degenerate_triangle(self):
        """Zero-area triangles are rejected with their index."""
        vertices = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
        normals = [[0, 0, 1]] * 3

        with self.assertRaises(ValueError) as context:
            TriangleMesh(vertices, normals, [[0, 1, 2]])
        assert "triangle 0" in str(context.exception)

    def test_non_unit_normal(self):
        """Vertex normals must have unit length."""
        vertices = [[0, 0, 0], [1, 0, 0], [0, 1, 0]]
        normals = [[0, 0, 1], [0, 0, 2], [0, 0, 1]]

        with self.assertRaises(ValueError) as context:
            TriangleMesh(vertices, normals, [[0, 1, 2]])
        assert "vertex 1" in str(context.exception)

    def test_index_out_of_range(self):
        """Triangles must reference existing vertices."""
        with self.assertRaises(ValueError):
            TriangleMesh([[0, 0, 0]], [[0, 0, 1]], [[0, 0, 1]])

    def test_geometry(self):
        """Areas and face normals follow the winding order."""
        mesh = get_test_quad()

        assert np.allclose(mesh.areas, [0.5, 0.5])
        assert np.allclose(mesh.face_normals, [[0, 0, 1], [0, 0, 1]])
        assert np.isclose(mesh.diagonal(), np.sqrt(2.0))

    def test_merged_without_validation(self):
        """Degenerate extra geometry can be merged on request."""
        mesh = get_test_quad()
        flat = TriangleMesh([[0, 0, 1], [1, 0, 1], [2, 0, 1]],
                            [[0, 0, 1]] * 3, [[0, 1, 2]], validate=False)

        merged = mesh.merged(flat, validate=False)

        assert len(merged) == 3
        assert np.array_equal(merged.triangles[2], [4, 5, 6])


class TestCamera(unittest.TestCase):
    """Tests for the pinhole camera."""

    def test_look_at_target_projects_to_center(self):
        """The target of look_at lands on the principal point."""
        camera = Camera.look_at([1.0, 2.0, 3.0], [0.0, 0.5, 0.0], 50.0,
                                50.0, 64, 48)

        assert np.allclose(camera.project([[0.0, 0.5, 0.0]]), [[32, 24]])

    def test_image_axes(self):
        """+x of the image points right and +y points down."""
        camera = get_test_camera()
        right = camera.position + camera.rotation @ [1.0, 0.0, 1.0]
        down = camera.position + camera.rotation @ [0.0, 1.0, 1.0]

        assert camera.project([right])[0, 0] > camera.cx
        assert camera.project([down])[0, 1] > camera.cy

    def test_non_orthonormal_rotation(self):
        """Scaled rotations are rejected."""
        to_world = np.eye(4)
        to_world[0, 0] = 2.0

        with self.assertRaises(ValueError):
            Camera(10, 10, 4, 3, 8, 6, to_world)

    def test_reflection(self):
        """Rotations with negative determinant are rejected."""
        to_world = np.diag([1.0, 1.0, -1.0, 1.0])

        with self.assertRaises(ValueError):
            Camera(10, 10, 4, 3, 8, 6, to_world)

    def test_descriptor_entry(self):
        """Cameras survive their descriptor representation."""
        camera = get_test_camera()
        copy = Camera.from_dict(camera.to_dict())

        assert np.array_equal(copy.to_world, camera.to_world)
        assert (copy.width, copy.height, copy.fx) == (8, 6, 10.0)


class TestScene(unittest.TestCase):
    """Tests for scene validation and I/O."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_frame_resolution_mismatch(self):
        """Frames must match the resolution of their camera."""
        with self.assertRaises(ValueError):
            Scene(get_test_quad(), [get_test_camera()],
                  [np.zeros((5, 8, 3))])

    def test_frame_count_mismatch(self):
        """Every camera needs one frame."""
        with self.assertRaises(ValueError):
            Scene(get_test_quad(), [get_test_camera()] * 2,
                  [np.zeros((6, 8, 3))])

    def test_aabb_must_contain_mesh(self):
        """An explicit AABB touching the mesh is rejected."""
        with self.assertRaises(ValueError):
            Scene(get_test_quad(), [get_test_camera()],
                  [np.zeros((6, 8, 3))],
                  aabb=[[0, 0, -1], [1, 1, 1]])

    def test_default_aabb(self):
        """The default AABB strictly contains the mesh."""
        scene = get_quad_scene()

        assert np.all(scene.aabb[0] < 0) and np.all(scene.aabb[1] > [1, 1, 0])

    def test_labels_by_grouping(self):
        """Part and semantic labels are selected by name."""
        scene = get_quad_scene()

        assert np.array_equal(scene.labels("part"), [1, 2])
        assert np.array_equal(scene.labels("SEMANTIC"), [3, 3])
        with self.assertRaises(ValueError):
            scene.labels("instance")

    def test_save_and_load(self):
        """A saved scene loads with its frames and observed labels."""
        scene = get_test_scene()
        descriptor = save_scene(scene, self.folder)

        loaded = load_scene(descriptor)

        assert len(loaded.mesh) == len(scene.mesh)
        assert np.allclose(loaded.aabb, scene.aabb)
        assert np.array_equal(loaded.frames[1].data, scene.frames[1].data)

        bvh = build_bvh(scene.mesh)
        observed = np.unique(np.concatenate([
            render_triangle_ids(bvh, scene.mesh, c).ravel()
            for c in scene.cameras]))
        observed = observed[observed >= 0]
        assert np.array_equal(loaded.part_labels[observed],
                              scene.part_labels[observed])
        assert np.array_equal(loaded.semantic_labels[observed],
                              scene.semantic_labels[observed])

    def test_relative_paths(self):
        """Relative paths resolve against the descriptor folder."""
        descriptor = save_scene(get_quad_scene(), self.folder,
                                label_maps=False)
        document = fileio.read_json(descriptor)

        assert document["mesh"] == "mesh.obj"
        assert len(load_scene(descriptor).frames) == 1

    def test_malformed_descriptor(self):
        """A descriptor without cameras is rejected."""
        descriptor = os.path.join(self.folder, "scene.json")
        fileio.write_json(descriptor, {"mesh": "mesh.obj", "frames": []})

        with self.assertRaises(ValueError):
            load_scene(descriptor)


class TestFuseSegmentation(unittest.TestCase):
    """Tests for the fusion of label maps onto triangles."""

    def test_majority_vote(self):
        """Each triangle gets the label of most of its pixels."""
        scene = get_quad_scene()
        ids = render_triangle_ids(build_bvh(scene.mesh), scene.mesh,
                                  scene.cameras[0])
        labels = np.where(ids == 0, 4, 9)

        assert np.array_equal(fuse_segmentation([labels], scene), [4, 9])

    def test_ties_go_to_the_smaller_label(self):
        """Equal votes from two views pick the smaller label."""
        scene = get_quad_scene()
        two_views = Scene(scene.mesh, scene.cameras * 2, scene.frames * 2)
        shape = (scene.cameras[0].height, scene.cameras[0].width)
        high = np.full(shape, 7)
        low = np.full(shape, 2)

        assert np.array_equal(fuse_segmentation([high, low], two_views),
                              [2, 2])
        assert np.array_equal(fuse_segmentation([low, high], two_views),
                              [2, 2])

    def test_negative_labels(self):
        """Negative labels are no valid segment IDs."""
        scene = get_quad_scene()

        with self.assertRaises(ValueError):
            fuse_segmentation([-np.ones((6, 8), dtype=int)], scene)
