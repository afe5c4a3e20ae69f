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
Readers and writers for all file formats used by fipt, and the tone
mapping operators shared by losses, metrics and previews.

HDR images are stored as PFM, label maps as binary PGM, meshes as OBJ
and previews as 8-bit PNG. Binary artifacts of other modules (radiance
cache dumps, hit records, checkpoints) are opened through the same
``FileManager``.

"""
import io
import json
import logging
import os
from os import path

import numpy as np
from PIL import Image

from fipt.constants import FILE_BYTE_ORDER_CHAR, METRIC_GAMMA, TONEMAP

logger = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = (".pfm", ".pgm", ".obj", ".png", ".bin", ".ckpt",
                        ".json", ".csv")


class FileManager(object):
    """
    Context manager for fipt file reading and writing.

    Parameters
    ----------
    file_name : str
        The file that will be read or written.
    mode : str
        One of ``'r'``, ``'w'``, ``'rb'`` or ``'wb'``.

    Attributes
    ----------
    file_path : str
        The absolute path to the file.
    mode : str
        The mode the file is opened in.

    Example
    -------
    >>> with FileManager("frame_0.pfm", "wb") as pfm_file:
    >>>     pfm_file.write(b"PF\\n1 1\\n-1.0\\n")

    """

    def __init__(self, file_name, mode):

        extension = path.splitext(file_name)[1].lower()
        if extension not in SUPPORTED_EXTENSIONS:
            raise ValueError(
                "File format '{}' is not a supported fipt file format."
                .format(extension))

        if mode not in ("r", "w", "rb", "wb"):
            raise ValueError("File mode '{}' not supported.".format(mode))

        self._file_path = path.abspath(file_name)
        self._mode = mode
        self._file = None

    @property
    def file_path(self):
        """The absolute path to the file."""
        return self._file_path

    @property
    def mode(self):
        """The mode the file is opened in."""
        return self._mode

    def __enter__(self):
        """Open the file, creating parent folders when writing."""
        if "w" in self.mode:
            create_folder(path.dirname(self.file_path))
        elif not path.isfile(self.file_path):
            raise FileNotFoundError(
                "File '{}' does not exist.".format(self.file_path))

        if "b" in self.mode:
            self._file = open(self.file_path, self.mode)
        else:
            self._file = open(self.file_path, self.mode, encoding="utf-8",
                              newline="\n")
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        """Close the file."""
        self._file.close()

    def write(self, output):
        """
        Write text or binary data into the file.

        Parameters
        ----------
        output : str or bytes
            The output that will be written into the file.

        Returns
        -------
        None.

        """
        if isinstance(output, str) and "b" in self.mode:
            self._file.write(output.encode("ascii"))
        else:
            self._file.write(output)

    def read(self):
        """Return the complete file content."""
        return self._file.read()


def create_folder(folder):
    """
    Create a new folder in case it does not exist already.

    Parameters
    ----------
    folder : str
        Path to the folder that will be created.

    Returns
    -------
    None.

    """
    abs_path = path.abspath(folder)
    if not path.isdir(abs_path):
        os.makedirs(abs_path)


def read_json(file_name):
    """Read a JSON document."""
    with FileManager(file_name, "r") as json_file:
        return json.loads(json_file.read())


def write_json(file_name, document):
    """Write a JSON document with stable key order."""
    with FileManager(file_name, "w") as json_file:
        json_file.write(json.dumps(document, indent=2, sort_keys=True))
        json_file.write("\n")


class HdrImage(object):
    """
    Linear RGB radiance image.

    Parameters
    ----------
    data : ArrayLike[float]
        Pixel values of shape (height, width, 3), stored top-to-bottom
        in row-major order.

    Attributes
    ----------
    data : numpy.ndarray[float32]
        The pixel values.
    width : int
        Number of pixel columns.
    height : int
        Number of pixel rows.

    """

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            msg = "Image data must have shape (height, width, 3), got {}." \
                .format(data.shape)
            raise ValueError(msg)
        self._data = data

    @property
    def data(self):
        """The pixel values."""
        return self._data

    @property
    def width(self):
        """Number of pixel columns."""
        return self._data.shape[1]

    @property
    def height(self):
        """Number of pixel rows."""
        return self._data.shape[0]

    def __repr__(self):
        return "HdrImage({}x{})".format(self.width, self.height)

    def check_finite(self):
        """
        Check that all pixel values are finite and non-negative.

        Raises
        ------
        ValueError
            If a pixel holds a non-finite or negative value.

        """
        bad = ~np.isfinite(self._data)
        if np.any(bad):
            row, col, _ = np.argwhere(bad)[0]
            msg = "Non-finite radiance at pixel ({}, {}).".format(col, row)
            raise ValueError(msg)

        negative = self._data < 0
        if np.any(negative):
            row, col, _ = np.argwhere(negative)[0]
            msg = "Negative radiance at pixel ({}, {}).".format(col, row)
            raise ValueError(msg)


def _read_header_tokens(raw, number_of_tokens):
    """
    Split the ASCII header of a PFM or PGM file into tokens.

    Comments starting with ``#`` are skipped. Exactly one whitespace
    character separates the last token from the payload.

    Returns
    -------
    tokens : list[bytes]
        The header tokens.
    offset : int
        Start of the binary payload.

    """
    tokens = []
    pos = 0
    size = len(raw)
    while len(tokens) < number_of_tokens:
        while pos < size and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < size and raw[pos:pos + 1] == b"#":
            while pos < size and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < size and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("Truncated file header.")
        tokens.append(raw[start:pos])

    # Single whitespace character before the payload
    return tokens, pos + 1


def read_pfm(file_name):
    """
    Read a color PFM file.

    Parameters
    ----------
    file_name : str
        Path to the ``.pfm`` file.

    Returns
    -------
    HdrImage
        The image with scanlines stored top-to-bottom.

    """
    with FileManager(file_name, "rb") as pfm_file:
        raw = pfm_file.read()

    tokens, offset = _read_header_tokens(raw, 4)
    if tokens[0] != b"PF":
        msg = "Bad PFM magic '{}' in '{}', expected 'PF'.".format(
            tokens[0].decode("ascii", "replace"), file_name)
        raise ValueError(msg)

    try:
        width, height = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError:
        raise ValueError("Malformed PFM header in '{}'.".format(file_name))

    if width <= 0 or height <= 0 or scale == 0.0:
        raise ValueError("Malformed PFM header in '{}'.".format(file_name))

    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * 3 * 4
    payload = raw[offset:]
    if len(payload) < expected:
        msg = ("Truncated PFM payload in '{}': {} bytes for a {}x{} image"
               .format(file_name, len(payload), width, height))
        raise ValueError(msg)
    if len(payload) > expected:
        msg = ("PFM dimension mismatch in '{}': {} bytes for a {}x{} image"
               .format(file_name, len(payload), width, height))
        raise ValueError(msg)

    data = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)

    # PFM stores scanlines bottom-to-top
    return HdrImage(data[::-1].astype(np.float32))


def write_pfm(image, file_name):
    """
    Write an image as little-endian color PFM.

    Parameters
    ----------
    image : HdrImage or ArrayLike[float]
        The image to write.
    file_name : str
        Path to the ``.pfm`` file.

    Returns
    -------
    None.

    """
    if not isinstance(image, HdrImage):
        image = HdrImage(image)

    header = "PF\n{} {}\n-1.0\n".format(image.width, image.height)
    data = np.ascontiguousarray(image.data[::-1],
                                dtype=FILE_BYTE_ORDER_CHAR + "f4")

    with FileManager(file_name, "wb") as pfm_file:
        pfm_file.write(header)
        pfm_file.write(data.tobytes())


def read_pgm(file_name):
    """
    Read a binary (P5) PGM label map.

    Parameters
    ----------
    file_name : str
        Path to the ``.pgm`` file.

    Returns
    -------
    numpy.ndarray[int]
        Labels of shape (height, width).

    """
    with FileManager(file_name, "rb") as pgm_file:
        raw = pgm_file.read()

    tokens, offset = _read_header_tokens(raw, 4)
    if tokens[0] != b"P5":
        msg = "Bad PGM magic '{}' in '{}', expected 'P5'.".format(
            tokens[0].decode("ascii", "replace"), file_name)
        raise ValueError(msg)

    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u1" if maxval < 256 else ">u2"
    expected = width * height * np.dtype(dtype).itemsize
    payload = raw[offset:offset + expected]
    if len(payload) < expected:
        raise ValueError("Truncated PGM payload in '{}'.".format(file_name))

    labels = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return labels.astype(np.int64)


def write_pgm(labels, file_name):
    """
    Write a label map as 16-bit binary PGM.

    Parameters
    ----------
    labels : ArrayLike[int]
        Labels of shape (height, width) in the range [0, 65535].
    file_name : str
        Path to the ``.pgm`` file.

    Returns
    -------
    None.

    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("Label map must be two-dimensional.")
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise ValueError("Labels must be in the range [0, 65535].")

    height, width = labels.shape
    with FileManager(file_name, "wb") as pgm_file:
        pgm_file.write("P5\n{} {}\n65535\n".format(width, height))
        pgm_file.write(np.ascontiguousarray(labels, dtype=">u2").tobytes())


def read_obj(file_name):
    """
    Read positions, normals and triangles from a Wavefront OBJ file.

    Polygons are fan-triangulated. If a face references normal indices
    that differ from its position indices, vertices are split so that
    every returned vertex has exactly one normal. Missing normals are
    replaced by area-weighted face normals.

    Parameters
    ----------
    file_name : str
        Path to the ``.obj`` file.

    Returns
    -------
    vertices : numpy.ndarray[float]
        Vertex positions of shape (number of vertices, 3).
    normals : numpy.ndarray[float]
        Vertex normals of shape (number of vertices, 3).
    triangles : numpy.ndarray[int]
        Vertex indices of shape (number of triangles, 3).

    """
    with FileManager(file_name, "r") as obj_file:
        lines = obj_file.read().splitlines()

    positions = []
    normals = []
    corners = []
    for line_number, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                positions.append([float(p) for p in parts[1:4]])
            elif parts[0] == "vn":
                normals.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                face = [_parse_face_token(token, len(positions),
                                          len(normals))
                        for token in parts[1:]]
                # Fan triangulation
                for i in range(1, len(face) - 1):
                    corners.append((face[0], face[i], face[i + 1]))
        except (ValueError, IndexError):
            msg = "Malformed OBJ line {} in '{}': '{}'".format(
                line_number, file_name, line)
            raise ValueError(msg)

    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(corners) == 0:
        return positions, np.zeros_like(positions), np.zeros((0, 3), int)

    corners = np.asarray(corners, dtype=int)  # (ntri, 3, 2)
    vertex_ids = corners[:, :, 0]
    normal_ids = corners[:, :, 1]

    if np.all(normal_ids < 0):
        normals = vertex_normals(positions, vertex_ids)
        return positions, normals, vertex_ids

    if np.any(normal_ids < 0):
        raise ValueError(
            "OBJ file '{}' mixes faces with and without normals."
            .format(file_name))

    if (len(normals) == len(positions)
            and np.array_equal(vertex_ids, normal_ids)):
        return positions, normals, vertex_ids

    # Split vertices so that every (position, normal) pair is unique
    pairs = np.stack((vertex_ids.ravel(), normal_ids.ravel()), axis=1)
    unique_pairs, inverse = np.unique(pairs, axis=0, return_inverse=True)
    triangles = inverse.reshape(-1, 3)
    return (positions[unique_pairs[:, 0]], normals[unique_pairs[:, 1]],
            triangles)


def _parse_face_token(token, number_of_positions, number_of_normals):
    """Convert an OBJ face token to zero-based (position, normal)."""
    fields = token.split("/")
    vertex = int(fields[0])
    vertex = vertex - 1 if vertex > 0 else number_of_positions + vertex

    normal = -1
    if len(fields) == 3 and fields[2]:
        normal = int(fields[2])
        normal = normal - 1 if normal > 0 else number_of_normals + normal

    return vertex, normal


def vertex_normals(vertices, triangles):
    """
    Compute area-weighted vertex normals.

    Parameters
    ----------
    vertices : numpy.ndarray[float]
        Vertex positions of shape (number of vertices, 3).
    triangles : numpy.ndarray[int]
        Vertex indices of shape (number of triangles, 3).

    Returns
    -------
    numpy.ndarray[float]
        Unit vertex normals. Isolated vertices get ``(0, 0, 1)``.

    """
    corners = vertices[triangles]
    face_normals = np.cross(corners[:, 1] - corners[:, 0],
                            corners[:, 2] - corners[:, 0])
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face_normals)

    length = np.linalg.norm(normals, axis=1)
    isolated = length == 0
    normals[isolated] = (0.0, 0.0, 1.0)
    length[isolated] = 1.0
    return normals / length[:, None]


def write_obj(file_name, vertices, normals, triangles):
    """
    Write positions, normals and triangles to a Wavefront OBJ file.

    Floats are written with their shortest round-trip representation,
    so reading the file back gives bit-identical values.

    Parameters
    ----------
    file_name : str
        Path to the ``.obj`` file.
    vertices : ArrayLike[float]
        Vertex positions of shape (number of vertices, 3).
    normals : ArrayLike[float]
        Vertex normals of shape (number of vertices, 3).
    triangles : ArrayLike[int]
        Vertex indices of shape (number of triangles, 3).

    Returns
    -------
    None.

    """
    vertices = np.asarray(vertices, dtype=float)
    normals = np.asarray(normals, dtype=float)
    triangles = np.asarray(triangles, dtype=int)

    lines = ["# fipt mesh"]
    lines.extend("v {!r} {!r} {!r}".format(*map(float, v)) for v in vertices)
    lines.extend("vn {!r} {!r} {!r}".format(*map(float, n)) for n in normals)
    lines.extend("f {0}//{0} {1}//{1} {2}//{2}".format(*(t + 1))
                 for t in triangles)

    with FileManager(file_name, "w") as obj_file:
        obj_file.write("\n".join(lines) + "\n")


def write_png(rgb, file_name, gamma=METRIC_GAMMA):
    """
    Write an 8-bit PNG preview of a linear RGB image.

    Parameters
    ----------
    rgb : HdrImage or ArrayLike[float]
        Linear radiance of shape (height, width, 3).
    file_name : str
        Path to the ``.png`` file.
    gamma : float, optional
        Exponent of the display curve. Default: ``1/2.2``.

    Returns
    -------
    None.

    """
    if isinstance(rgb, HdrImage):
        rgb = rgb.data
    pixels = np.round(gamma_tonemap(rgb, gamma) * 255.0).astype(np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError("PNG previews need an RGB image, got shape {}."
                         .format(pixels.shape))

    buffer = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buffer, format="PNG")
    with FileManager(file_name, "wb") as png_file:
        png_file.write(buffer.getvalue())


# Tone mapping
# ------------------------------------------------------------------

_SRGB_KNEE = 0.0031308


def srgb_encode(x):
    """Apply the sRGB transfer curve to linear values in [0, 1]."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= _SRGB_KNEE, 12.92 * x,
                    1.055 * np.power(np.maximum(x, _SRGB_KNEE), 1.0 / 2.4)
                    - 0.055)


def srgb_encode_derivative(x):
    """Derivative of ``srgb_encode``."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= _SRGB_KNEE, 12.92,
                    (1.055 / 2.4)
                    * np.power(np.maximum(x, _SRGB_KNEE), 1.0 / 2.4 - 1.0))


def _clamp_negative(rgb):
    rgb = np.asarray(rgb, dtype=float)
    if np.any(rgb < 0):
        logger.debug("tonemap: clamping %d negative values",
                     int(np.count_nonzero(rgb < 0)))
        rgb = np.maximum(rgb, 0.0)
    return rgb


def _reinhard_srgb(rgb):
    rgb = _clamp_negative(rgb)
    return srgb_encode(rgb / (1.0 + rgb))


def _reinhard_srgb_derivative(rgb):
    rgb = _clamp_negative(rgb)
    return (srgb_encode_derivative(rgb / (1.0 + rgb))
            / np.square(1.0 + rgb))


# Mapping name -> (curve, derivative)
TONEMAPS = {"reinhard_srgb": (_reinhard_srgb, _reinhard_srgb_derivative)}


def tonemap(rgb, name=TONEMAP):
    """
    Compress linear HDR radiance into [0, 1).

    The default curve is Reinhard compression ``x / (1 + x)`` followed
    by the sRGB transfer curve. It is monotone, ``tonemap(0) = 0`` and
    it approaches 1 for large radiance. Negative input is clamped to 0.

    Parameters
    ----------
    rgb : ArrayLike[float]
        Linear radiance.
    name : str, optional
        Key into ``TONEMAPS``. Default: ``'reinhard_srgb'``.

    Returns
    -------
    numpy.ndarray[float]
        The tone-mapped values.

    """
    return TONEMAPS[name][0](rgb)


def tonemap_derivative(rgb, name=TONEMAP):
    """Element-wise derivative of ``tonemap`` with respect to ``rgb``."""
    return TONEMAPS[name][1](rgb)


def gamma_tonemap(rgb, gamma=METRIC_GAMMA):
    """
    Display tone mapping used for metrics and previews.

    Parameters
    ----------
    rgb : ArrayLike[float]
        Linear values.
    gamma : float, optional
        Exponent of the curve. Default: ``1/2.2``.

    Returns
    -------
    numpy.ndarray[float]
        ``rgb ** gamma`` clipped to [0, 1].

    """
    rgb = np.maximum(np.asarray(rgb, dtype=float), 0.0)
    return np.clip(np.power(rgb, gamma), 0.0, 1.0)
