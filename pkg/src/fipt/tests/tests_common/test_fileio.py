"""
Tests for the image, label and mesh file formats and the tone mappings.

"""
import os
import shutil
import tempfile
import unittest

import numpy as np
from PIL import Image

from fipt import fileio


class TestFileManager(unittest.TestCase):
    """Tests for the FileManager context manager."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_unsupported_extension(self):
        """Files with unknown extensions are rejected."""
        with self.assertRaises(ValueError):
            fileio.FileManager(os.path.join(self.folder, "a.txt"), "w")

    def test_missing_file(self):
        """Reading a missing file raises FileNotFoundError."""
        with self.assertRaises(FileNotFoundError):
            with fileio.FileManager(os.path.join(self.folder, "a.json"),
                                    "r"):
                pass

    def test_parent_folders_are_created(self):
        """Writing creates missing parent folders."""
        file_name = os.path.join(self.folder, "x", "y", "doc.json")
        fileio.write_json(file_name, {"b": 1, "a": [1, 2]})

        assert fileio.read_json(file_name) == {"a": [1, 2], "b": 1}


class TestPfm(unittest.TestCase):
    """Tests for reading and writing PFM images."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()
        self.file_name = os.path.join(self.folder, "image.pfm")

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_top_row_stays_on_top(self):
        """The first row of the written array is the first row read."""
        data = np.zeros((3, 2, 3), dtype=np.float32)
        data[0, 0] = (1.0, 2.0, 3.0)
        fileio.write_pfm(data, self.file_name)

        image = fileio.read_pfm(self.file_name)

        assert (image.width, image.height) == (2, 3)
        assert np.array_equal(image.data[0, 0], [1.0, 2.0, 3.0])
        assert np.all(image.data[1:] == 0)

    def test_payload_is_little_endian_bottom_up(self):
        """The payload starts with the bottom row in little-endian."""
        data = np.zeros((2, 1, 3), dtype=np.float32)
        data[1, 0, 0] = 0.25
        fileio.write_pfm(data, self.file_name)

        with open(self.file_name, "rb") as pfm_file:
            raw = pfm_file.read()

        assert raw.startswith(b"PF\n1 2\n-1.0\n")
        payload = np.frombuffer(raw[len(b"PF\n1 2\n-1.0\n"):], dtype="<f4")
        assert payload[0] == 0.25

    def test_truncated_payload(self):
        """A PFM file with missing pixel data is rejected."""
        with open(self.file_name, "wb") as pfm_file:
            pfm_file.write(b"PF\n2 2\n-1.0\n" + b"\x00" * 20)

        with self.assertRaises(ValueError):
            fileio.read_pfm(self.file_name)

    def test_oversized_payload(self):
        """A PFM file with more data than its header announces fails."""
        with open(self.file_name, "wb") as pfm_file:
            pfm_file.write(b"PF\n1 1\n-1.0\n" + b"\x00" * 16)

        with self.assertRaises(ValueError):
            fileio.read_pfm(self.file_name)

    def test_big_endian_scale(self):
        """A positive scale marks big-endian data."""
        with open(self.file_name, "wb") as pfm_file:
            pfm_file.write(b"PF\n1 1\n1.0\n"
                           + np.array([1.0, 2.0, 4.0], dtype=">f4").tobytes())

        assert np.array_equal(fileio.read_pfm(self.file_name).data[0, 0],
                              [1.0, 2.0, 4.0])

    def test_non_finite_values_are_detected(self):
        """check_finite names the offending pixel."""
        data = np.zeros((2, 2, 3))
        data[1, 0, 2] = np.inf

        with self.assertRaises(ValueError) as context:
            fileio.HdrImage(data).check_finite()
        assert "(0, 1)" in str(context.exception)

    def test_negative_values_are_detected(self):
        """Negative radiance is no valid input."""
        with self.assertRaises(ValueError):
            fileio.HdrImage(-np.ones((1, 1, 3))).check_finite()


class TestPgm(unittest.TestCase):
    """Tests for 16-bit label maps."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()
        self.file_name = os.path.join(self.folder, "labels.pgm")

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_labels_above_255(self):
        """Labels that need two bytes survive writing and reading."""
        labels = np.array([[0, 1, 300], [65535, 7, 2]])
        fileio.write_pgm(labels, self.file_name)

        assert np.array_equal(fileio.read_pgm(self.file_name), labels)

    def test_out_of_range_labels(self):
        """Negative labels cannot be written."""
        with self.assertRaises(ValueError):
            fileio.write_pgm(np.array([[-1]]), self.file_name)


class TestObj(unittest.TestCase):
    """Tests for the OBJ reader."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()
        self.file_name = os.path.join(self.folder, "mesh.obj")

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def _write(self, text):
        with open(self.file_name, "w") as obj_file:
            obj_file.write(text)

    def test_quads_are_fan_triangulated(self):
        """A quad becomes two triangles with computed normals."""
        self._write("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")

        vertices, normals, triangles = fileio.read_obj(self.file_name)

        assert vertices.shape == (4, 3)
        assert np.array_equal(triangles, [[0, 1, 2], [0, 2, 3]])
        assert np.allclose(normals, [[0, 0, 1]] * 4)

    def test_vertices_with_two_normals_are_split(self):
        """A position used with different normals is duplicated."""
        self._write("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\n"
                    "vn 0 0 1\nvn 0 1 0\n"
                    "f 1//1 2//1 3//1\nf 1//2 4//2 2//2\n")

        vertices, normals, triangles = fileio.read_obj(self.file_name)

        assert len(vertices) == 6
        corners = normals[triangles]
        assert np.allclose(corners[0], [[0, 0, 1]] * 3)
        assert np.allclose(corners[1], [[0, 1, 0]] * 3)
        assert np.allclose(vertices[triangles[1]],
                           [[0, 0, 0], [0, 0, 1], [1, 0, 0]])

    def test_malformed_line(self):
        """Unparsable lines name their line number."""
        self._write("v 0 0 0\nv 1 x 0\n")

        with self.assertRaises(ValueError) as context:
            fileio.read_obj(self.file_name)
        assert "line 2" in str(context.exception)

    def test_mixed_normals(self):
        """Faces with and without normals cannot be combined."""
        self._write("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\n"
                    "f 1//1 2//1 3//1\nf 1 3 2\n")

        with self.assertRaises(ValueError):
            fileio.read_obj(self.file_name)

    def test_written_floats_read_back_exactly(self):
        """Positions and normals survive writing without rounding."""
        rng = np.random.default_rng(3)
        vertices = rng.random((3, 3)) * 1e3 - 0.1
        normals = np.tile([0.0, 0.6, 0.8], (3, 1))

        fileio.write_obj(self.file_name, vertices, normals, [[0, 1, 2]])
        read_vertices, read_normals, triangles = \
            fileio.read_obj(self.file_name)

        assert np.array_equal(read_vertices, vertices)
        assert np.array_equal(read_normals, normals)
        assert triangles.tolist() == [[0, 1, 2]]


class TestTonemap(unittest.TestCase):
    """Tests for the loss and display tone mappings."""

    def test_tonemap_range(self):
        """The loss tone mapping is monotone from 0 toward 1."""
        values = np.array([-1.0, 0.0, 0.01, 1.0, 10.0, 1e6])

        mapped = fileio.tonemap(values)

        assert mapped[0] == 0.0 and mapped[1] == 0.0
        assert np.all(np.diff(mapped[1:]) > 0)
        assert mapped[-1] < 1.0

    def test_tonemap_derivative(self):
        """The derivative agrees with central differences."""
        x = np.array([0.001, 0.2, 1.5, 30.0])
        h = 1e-6

        numeric = (fileio.tonemap(x + h) - fileio.tonemap(x - h)) / (2 * h)

        assert np.allclose(fileio.tonemap_derivative(x), numeric,
                           rtol=1e-4)

    def test_gamma_tonemap_clips(self):
        """Display values are clipped to [0, 1]."""
        mapped = fileio.gamma_tonemap(np.array([-1.0, 0.25, 4.0]), 0.5)

        assert np.allclose(mapped, [0.0, 0.5, 1.0])

    def test_png_preview(self):
        """PNG previews hold the display-mapped 8-bit pixels."""
        folder = tempfile.mkdtemp()
        try:
            file_name = os.path.join(folder, "previews", "preview.png")
            rgb = np.zeros((2, 3, 3))
            rgb[0, 0] = 1.0
            rgb[1, 2] = [0.25, 4.0, -1.0]

            fileio.write_png(rgb, file_name, gamma=0.5)

            with Image.open(file_name) as image:
                assert image.mode == "RGB"
                assert image.size == (3, 2)
                pixels = np.asarray(image)
            assert pixels[0, 0].tolist() == [255, 255, 255]
            assert pixels[1, 2].tolist() == [128, 255, 0]
            assert pixels[0, 1].tolist() == [0, 0, 0]
        finally:
            shutil.rmtree(folder, ignore_errors=True)

    def test_png_needs_rgb(self):
        """Single-channel images are rejected."""
        with self.assertRaises(ValueError):
            fileio.write_png(np.ones((2, 3)), "preview.png")
