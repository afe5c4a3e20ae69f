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
Scene representation: triangle meshes, pinhole cameras and posed HDR
frames, together with loading and saving of scene descriptors and the
fusion of per-view segmentation maps onto the mesh.

"""
import logging
from os import path

import numpy as np

from fipt import fileio
from fipt.fileio import HdrImage

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6
MIN_TRIANGLE_AREA = 1e-12
ROTATION_TOLERANCE = 1e-6


class TriangleMesh(object):
    """
    Indexed triangle mesh with per-vertex normals.

    Parameters
    ----------
    vertices : ArrayLike[float]
        Vertex positions in meters, shape (number of vertices, 3).
    normals : ArrayLike[float]
        Unit vertex normals, shape (number of vertices, 3).
    triangles : ArrayLike[int]
        Vertex indices, shape (number of triangles, 3).
    validate : bool, optional
        If ``True``, normals and triangle areas are checked. Default:
        ``True``.

    Attributes
    ----------
    vertices : numpy.ndarray[float]
        Vertex positions.
    normals : numpy.ndarray[float]
        Vertex normals.
    triangles : numpy.ndarray[int]
        Vertex indices per triangle.
    corners : numpy.ndarray[float]
        Corner positions per triangle, shape (number of triangles, 3, 3).
    areas : numpy.ndarray[float]
        Triangle areas in square meters.
    face_normals : numpy.ndarray[float]
        Unit geometric normals following the winding order.

    """

    def __init__(self, vertices, normals, triangles, validate=True):

        self._vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self._normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self._triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)

        if len(self._normals) != len(self._vertices):
            msg = "Got {} normals for {} vertices.".format(
                len(self._normals), len(self._vertices))
            raise ValueError(msg)

        if self._triangles.size and (self._triangles.min() < 0 or
                                     self._triangles.max()
                                     >= len(self._vertices)):
            raise ValueError("Triangle indices out of range.")

        self._corners = self._vertices[self._triangles]
        cross = np.cross(self._corners[:, 1] - self._corners[:, 0],
                         self._corners[:, 2] - self._corners[:, 0])
        double_area = np.linalg.norm(cross, axis=1)
        self._areas = 0.5 * double_area
        with np.errstate(invalid="ignore", divide="ignore"):
            self._face_normals = cross / double_area[:, None]

        if validate:
            self.validate()

    @property
    def vertices(self):
        """Vertex positions."""
        return self._vertices

    @property
    def normals(self):
        """Vertex normals."""
        return self._normals

    @property
    def triangles(self):
        """Vertex indices per triangle."""
        return self._triangles

    @property
    def corners(self):
        """Corner positions per triangle."""
        return self._corners

    @property
    def areas(self):
        """Triangle areas."""
        return self._areas

    @property
    def face_normals(self):
        """Unit geometric normals."""
        return self._face_normals

    def __len__(self):
        return len(self._triangles)

    def __str__(self):
        return "TriangleMesh({} vertices, {} triangles)".format(
            len(self._vertices), len(self._triangles))

    def validate(self):
        """
        Check unit normals and non-degenerate triangles.

        Raises
        ------
        ValueError
            Naming the first offending vertex or triangle.

        """
        lengths = np.linalg.norm(self._normals, axis=1)
        bad = np.flatnonzero(~(np.abs(lengths - 1.0) <= NORMAL_TOLERANCE))
        if bad.size:
            msg = "Normal of vertex {} has length {}, expected 1.".format(
                bad[0], lengths[bad[0]])
            raise ValueError(msg)

        bad = np.flatnonzero(~(self._areas > MIN_TRIANGLE_AREA))
        if bad.size:
            msg = "Degenerate triangle {} with area {} m^2.".format(
                bad[0], self._areas[bad[0]])
            raise ValueError(msg)

    def bounds(self):
        """Return the (min, max) corners of the vertex bounding box."""
        if len(self._vertices) == 0:
            raise ValueError("Empty mesh has no bounds.")
        return self._vertices.min(axis=0), self._vertices.max(axis=0)

    def diagonal(self):
        """Length of the bounding box diagonal."""
        lower, upper = self.bounds()
        return float(np.linalg.norm(upper - lower))

    def shading_normals(self, triangle_ids, barycentrics):
        """
        Interpolate unit vertex normals.

        Parameters
        ----------
        triangle_ids : numpy.ndarray[int]
            Triangle per query.
        barycentrics : numpy.ndarray[float]
            Barycentric coordinates per query, shape (n, 3).

        Returns
        -------
        numpy.ndarray[float]
            Unit normals of shape (n, 3).

        """
        vertex_normals = self._normals[self._triangles[triangle_ids]]
        normals = np.einsum("nk,nkd->nd", barycentrics, vertex_normals)
        length = np.linalg.norm(normals, axis=1, keepdims=True)

        # Opposite vertex normals can cancel out
        fallback = self._face_normals[triangle_ids]
        return np.where(length > 1e-12, normals / np.maximum(length, 1e-12),
                        fallback)

    def merged(self, other, validate=True):
        """Return a new mesh holding the triangles of both meshes."""
        offset = len(self._vertices)
        return TriangleMesh(np.concatenate((self._vertices, other.vertices)),
                            np.concatenate((self._normals, other.normals)),
                            np.concatenate((self._triangles,
                                            other.triangles + offset)),
                            validate=validate)


class Camera(object):
    """
    Pinhole camera with OpenCV conventions.

    The camera looks along its local +z axis, +x points to the right
    and +y points down in the image.

    Parameters
    ----------
    fx, fy : float
        Focal lengths in pixels.
    cx, cy : float
        Principal point in pixels.
    width, height : int
        Resolution in pixels.
    to_world : ArrayLike[float]
        Camera-to-world rigid transform as 4x4 matrix (or 16 row-major
        values).

    """

    def __init__(self, fx, fy, cx, cy, width, height, to_world):

        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)

        to_world = np.asarray(to_world, dtype=float).reshape(4, 4)
        rotation = to_world[:3, :3]
        error = np.abs(rotation.T @ rotation - np.eye(3)).max()
        if not error <= ROTATION_TOLERANCE:
            msg = "Camera rotation is not orthonormal (error {:.3g})." \
                .format(error)
            raise ValueError(msg)
        if np.linalg.det(rotation) < 0:
            raise ValueError("Camera rotation is a reflection.")
        if not np.allclose(to_world[3], (0, 0, 0, 1)):
            raise ValueError("Camera transform is not a rigid motion.")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("Camera resolution must be positive.")

        self._to_world = to_world

    @property
    def to_world(self):
        """Camera-to-world transform."""
        return self._to_world

    @property
    def rotation(self):
        """Camera-to-world rotation."""
        return self._to_world[:3, :3]

    @property
    def position(self):
        """Camera center in world coordinates."""
        return self._to_world[:3, 3]

    def __repr__(self):
        return "Camera({}x{}, f=({:g}, {:g}))".format(
            self.width, self.height, self.fx, self.fy)

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0, 1, 0),
                cx=None, cy=None):
        """
        Create a camera at ``eye`` looking at ``target``.

        The principal point defaults to the image center.

        """
        eye = np.asarray(eye, dtype=float)
        forward = np.asarray(target, dtype=float) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=float)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, (0.0, 0.0, 1.0))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)

        to_world = np.eye(4)
        to_world[:3, 0] = right
        to_world[:3, 1] = down
        to_world[:3, 2] = forward
        to_world[:3, 3] = eye
        cx = width / 2.0 if cx is None else cx
        cy = height / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, to_world)

    def project(self, points):
        """
        Project world points to continuous pixel coordinates.

        Parameters
        ----------
        points : ArrayLike[float]
            World positions, shape (n, 3).

        Returns
        -------
        numpy.ndarray[float]
            Pixel coordinates (x, y) of shape (n, 2).

        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        local = (points - self.position) @ self.rotation
        x = self.fx * local[:, 0] / local[:, 2] + self.cx
        y = self.fy * local[:, 1] / local[:, 2] + self.cy
        return np.stack((x, y), axis=1)

    def to_dict(self):
        """Return the descriptor entry of the camera."""
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "to_world": [float(v) for v in self._to_world.ravel()]}

    @classmethod
    def from_dict(cls, entry):
        """Create a camera from a descriptor entry."""
        return cls(entry["fx"], entry["fy"], entry["cx"], entry["cy"],
                   entry["width"], entry["height"], entry["to_world"])


class Scene(object):
    """
    Posed HDR captures of a scene with known geometry.

    Parameters
    ----------
    mesh : TriangleMesh
        The scene geometry.
    cameras : Sequence[Camera]
        One camera per view.
    frames : Sequence[HdrImage]
        Linear radiance per view.
    part_labels : ArrayLike[int], optional
        Material-part ID per triangle. Default: all ``0``.
    semantic_labels : ArrayLike[int], optional
        Semantic class ID per triangle. Default: all ``0``.
    aabb : ArrayLike[float], optional
        Bounding box ``[[x0, y0, z0], [x1, y1, z1]]`` strictly containing
        the mesh. If omitted, the mesh bounds padded by 0.1 % of their
        diagonal are used.

    """

    def __init__(self, mesh, cameras, frames, part_labels=None,
                 semantic_labels=None, aabb=None):

        self._mesh = mesh
        self._cameras = list(cameras)
        self._frames = [f if isinstance(f, HdrImage) else HdrImage(f)
                        for f in frames]

        if len(self._cameras) != len(self._frames):
            msg = "Got {} cameras but {} frames.".format(
                len(self._cameras), len(self._frames))
            raise ValueError(msg)

        for view, (camera, frame) in enumerate(zip(self._cameras,
                                                   self._frames)):
            if (frame.width, frame.height) != (camera.width, camera.height):
                msg = ("Frame {} has resolution {}x{} but its camera "
                       "expects {}x{}.").format(view, frame.width,
                                                frame.height, camera.width,
                                                camera.height)
                raise ValueError(msg)
            try:
                frame.check_finite()
            except ValueError as error:
                raise ValueError("Frame {}: {}".format(view, error))

        lower, upper = mesh.bounds()
        if aabb is None:
            pad = 1e-3 * max(float(np.linalg.norm(upper - lower)), 1e-6)
            aabb = np.stack((lower - pad, upper + pad))
        aabb = np.asarray(aabb, dtype=float).reshape(2, 3)
        if not (np.all(aabb[0] < lower) and np.all(upper < aabb[1])):
            msg = "Scene AABB {} does not strictly contain the mesh." \
                .format(aabb.tolist())
            raise ValueError(msg)
        self._aabb = aabb

        self._part_labels = self._check_labels(part_labels, "part")
        self._semantic_labels = self._check_labels(semantic_labels,
                                                   "semantic")

    def _check_labels(self, labels, kind):
        if labels is None:
            return np.zeros(len(self._mesh), dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(self._mesh),):
            msg = "Got {} {} labels for {} triangles.".format(
                labels.size, kind, len(self._mesh))
            raise ValueError(msg)
        return labels

    @property
    def mesh(self):
        """The scene geometry."""
        return self._mesh

    @property
    def cameras(self):
        """Cameras per view."""
        return self._cameras

    @property
    def frames(self):
        """Radiance images per view."""
        return self._frames

    @property
    def part_labels(self):
        """Material-part ID per triangle."""
        return self._part_labels

    @property
    def semantic_labels(self):
        """Semantic class ID per triangle."""
        return self._semantic_labels

    @property
    def aabb(self):
        """Scene bounding box."""
        return self._aabb

    @property
    def number_of_views(self):
        """Number of posed frames."""
        return len(self._frames)

    def diagonal(self):
        """Length of the AABB diagonal."""
        return float(np.linalg.norm(self._aabb[1] - self._aabb[0]))

    def labels(self, grouping):
        """Return part or semantic labels for a grouping constant."""
        from fipt.constants import PART, SEMANTIC, as_constant
        grouping = as_constant(grouping, PART, SEMANTIC)
        return self._part_labels if grouping == PART \
            else self._semantic_labels

    def __str__(self):
        return "Scene({} triangles, {} views)".format(len(self._mesh),
                                                      self.number_of_views)


def load_scene(file_name):
    """
    Load and validate a scene from a JSON descriptor.

    Relative paths in the descriptor are resolved against the folder of
    the descriptor. Label maps, if present, are fused onto the mesh.

    Parameters
    ----------
    file_name : str
        Path to the ``scene.json`` descriptor.

    Returns
    -------
    Scene
        The validated scene.

    """
    descriptor = fileio.read_json(file_name)
    folder = path.dirname(path.abspath(file_name))

    def resolve(entry):
        return entry if path.isabs(entry) else path.join(folder, entry)

    try:
        mesh_file = resolve(descriptor["mesh"])
        camera_entries = descriptor["cameras"]
        frame_files = [resolve(f) for f in descriptor["frames"]]
        aabb = descriptor.get("aabb")
        part_files = [resolve(f) for f in descriptor.get("part_labels", [])]
        semantic_files = [resolve(f)
                          for f in descriptor.get("semantic_labels", [])]
    except (KeyError, TypeError) as error:
        msg = "Malformed scene descriptor '{}': {}".format(file_name, error)
        raise ValueError(msg)

    vertices, normals, triangles = fileio.read_obj(mesh_file)
    try:
        mesh = TriangleMesh(vertices, normals, triangles)
        cameras = [Camera.from_dict(entry) for entry in camera_entries]
    except KeyError as error:
        msg = "Malformed scene descriptor '{}': camera misses {}".format(
            file_name, error)
        raise ValueError(msg)
    except ValueError as error:
        raise ValueError("'{}': {}".format(file_name, error))

    frames = []
    for frame_file in frame_files:
        frame = fileio.read_pfm(frame_file)
        try:
            frame.check_finite()
        except ValueError as error:
            raise ValueError("'{}': {}".format(frame_file, error))
        frames.append(frame)

    scene = Scene(mesh, cameras, frames, aabb=aabb)

    if part_files:
        part = fuse_segmentation([fileio.read_pgm(f) for f in part_files],
                                 scene)
    else:
        part = None
    if semantic_files:
        semantic = fuse_segmentation(
            [fileio.read_pgm(f) for f in semantic_files], scene)
    else:
        semantic = None

    logger.info("loaded %s from %s", scene, file_name)
    return Scene(mesh, cameras, frames, part, semantic, scene.aabb)


def save_scene(scene, folder, label_maps=True):
    """
    Write a scene descriptor with its mesh, frames and label maps.

    Per-triangle labels are stored as per-view label maps obtained by
    casting a ray through every pixel center, so ``load_scene`` recovers
    the labels of all observed triangles.

    Parameters
    ----------
    scene : Scene
        The scene to write.
    folder : str
        Output folder; ``scene.json`` is written into it.
    label_maps : bool, optional
        If ``False``, no label maps are written. Default: ``True``.

    Returns
    -------
    str
        Path to the written descriptor.

    """
    fileio.create_folder(folder)
    mesh = scene.mesh
    fileio.write_obj(path.join(folder, "mesh.obj"), mesh.vertices,
                     mesh.normals, mesh.triangles)

    descriptor = {"mesh": "mesh.obj",
                  "aabb": scene.aabb.tolist(),
                  "cameras": [c.to_dict() for c in scene.cameras],
                  "frames": []}

    for view, frame in enumerate(scene.frames):
        frame_file = "frames/frame_{}.pfm".format(view)
        fileio.write_pfm(frame, path.join(folder, frame_file))
        descriptor["frames"].append(frame_file)

    if label_maps:
        # Local import, geometry depends on the scene types
        from fipt.geometry import build_bvh, render_triangle_ids

        bvh = build_bvh(mesh)
        descriptor["part_labels"] = []
        descriptor["semantic_labels"] = []
        for view, camera in enumerate(scene.cameras):
            ids = render_triangle_ids(bvh, mesh, camera)
            observed = ids >= 0
            for key, labels in (("part_labels", scene.part_labels),
                                ("semantic_labels", scene.semantic_labels)):
                label_map = np.zeros(ids.shape, dtype=np.int64)
                label_map[observed] = labels[ids[observed]]
                label_file = "labels/{}_{}.pgm".format(key.split("_")[0],
                                                       view)
                fileio.write_pgm(label_map, path.join(folder, label_file))
                descriptor[key].append(label_file)

    descriptor_file = path.join(folder, "scene.json")
    fileio.write_json(descriptor_file, descriptor)
    return descriptor_file


def fuse_segmentation(label_maps, scene, bvh=None):
    """
    Assign every triangle the most frequent label among its pixels.

    A ray is cast through every pixel center of every view; the label of
    the pixel is counted for the hit triangle. Ties break toward the
    smaller label, unobserved triangles get label ``0``. The result does
    not depend on the order of the views.

    Parameters
    ----------
    label_maps : Sequence[ArrayLike[int]]
        One label image of shape (height, width) per view.
    scene : Scene
        The scene the labels belong to.
    bvh : Bvh, optional
        Acceleration structure of the scene mesh. Built if omitted.

    Returns
    -------
    numpy.ndarray[int]
        Label per triangle.

    """
    from fipt.geometry import build_bvh, render_triangle_ids

    if len(label_maps) != scene.number_of_views:
        msg = "Got {} label maps for {} views.".format(len(label_maps),
                                                      scene.number_of_views)
        raise ValueError(msg)

    if bvh is None:
        bvh = build_bvh(scene.mesh)

    number_of_triangles = len(scene.mesh)
    observed_triangles = []
    observed_labels = []
    for view, (labels, camera) in enumerate(zip(label_maps, scene.cameras)):
        labels = np.asarray(labels)
        if labels.shape != (camera.height, camera.width):
            msg = ("Label map {} has shape {} but view {} has resolution "
                   "{}x{}.").format(view, labels.shape, view, camera.width,
                                    camera.height)
            raise ValueError(msg)
        if labels.size and labels.min() < 0:
            raise ValueError("Label map {} holds negative labels."
                             .format(view))

        ids = render_triangle_ids(bvh, scene.mesh, camera)
        hit = ids >= 0
        observed_triangles.append(ids[hit])
        observed_labels.append(labels[hit].astype(np.int64))

    fused = np.zeros(number_of_triangles, dtype=np.int64)
    if not observed_triangles:
        return fused
    triangles = np.concatenate(observed_triangles)
    labels = np.concatenate(observed_labels)
    if triangles.size == 0:
        return fused

    # Count (triangle, label) pairs
    pairs, counts = np.unique(np.stack((triangles, labels), axis=1),
                              axis=0, return_counts=True)

    # Per triangle: highest count first, then smallest label
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs = pairs[order]
    first = np.unique(pairs[:, 0], return_index=True)[1]
    fused[pairs[first, 0]] = pairs[first, 1]

    logger.debug("fused labels onto %d of %d triangles", first.size,
                 number_of_triangles)
    return fused
