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
Procedural indoor scenes with known materials and emitters.

A ``GtSceneSpec`` describes a closed box room, optional furniture boxes,
ceiling area lights and a camera trajectory. ``gen_synthetic`` renders
the captures with the path tracer and writes them as a regular scene
together with per-view ground-truth maps for evaluation.

Room coordinates: the floor spans x in [0, width], z in [0, depth] at
y = 0, the ceiling is at y = height.

"""
import logging
from dataclasses import dataclass, field
from os import path
from typing import List

import numpy as np

from fipt import fileio
from fipt.configuration import ConfigMixin
from fipt.emitter import EmitterSet, save_emitters
from fipt.geometry import build_bvh
from fipt.renderer import (RenderConfig, TriangleMaterials, path_trace,
                           predict_maps, save_materials)
from fipt.scene import Camera, Scene, TriangleMesh, save_scene

logger = logging.getLogger(__name__)

# Semantic classes of the generated surfaces
WALL_CLASS = 1
FLOOR_CLASS = 2
CEILING_CLASS = 3
FURNITURE_CLASS = 4
LIGHT_CLASS = 5

GT_MAPS = ("kd", "albedo", "roughness", "metallic", "emission_mask",
           "emission")

# Inward-facing room faces: name, fixed axis, fixed side, semantic class
_ROOM_FACES = (("floor", 1, 0, FLOOR_CLASS),
               ("ceiling", 1, 1, CEILING_CLASS),
               ("left", 0, 0, WALL_CLASS),
               ("right", 0, 1, WALL_CLASS),
               ("back", 2, 0, WALL_CLASS),
               ("front", 2, 1, WALL_CLASS))

_DEFAULT_SURFACES = {
    "floor": {"a": [0.55, 0.45, 0.35], "m": 0.0, "sigma": 0.8},
    "ceiling": {"a": [0.8, 0.8, 0.8], "m": 0.0, "sigma": 1.0},
    "left": {"a": [0.7, 0.25, 0.2], "m": 0.0, "sigma": 1.0},
    "right": {"a": [0.2, 0.5, 0.25], "m": 0.0, "sigma": 1.0},
    "back": {"a": [0.7, 0.7, 0.7], "m": 0.0, "sigma": 1.0},
    "front": {"a": [0.7, 0.7, 0.7], "m": 0.0, "sigma": 1.0},
}

_FIXTURE = {"a": [0.5, 0.5, 0.5], "m": 0.0, "sigma": 1.0}


def _default_surfaces():
    return {k: dict(v) for k, v in _DEFAULT_SURFACES.items()}


def _default_lights():
    return [{"center": [0.5, 0.5], "size": [0.25, 0.25],
             "radiance": [5.0, 5.0, 5.0]}]


@dataclass
class GtSceneSpec(ConfigMixin):
    """
    Description of a procedural box room.

    Materials are dictionaries with ``a``, ``m`` and ``sigma`` and
    optionally ``checker_a`` and ``checker_size``. Furniture boxes have
    ``min``, ``max`` (room coordinates) and ``material``. Lights have a
    ``center`` and ``size`` as fractions of the ceiling's x/z extent and
    an RGB ``radiance``. ``relight_lights`` are placed like lights but
    do not emit in the captures; their emitter set is written for
    relighting tests.

    """
    room: List[float] = field(default_factory=lambda: [4.0, 2.5, 4.0])
    subdivisions: int = 4
    surfaces: dict = field(default_factory=_default_surfaces)
    boxes: list = field(default_factory=list)
    lights: list = field(default_factory=_default_lights)
    relight_lights: list = field(default_factory=list)
    trajectory: str = "random"
    number_of_views: int = 60
    width: int = 128
    height: int = 128
    fov: float = 70.0
    camera_height: List[float] = field(default_factory=lambda: [0.3, 0.7])
    spp: int = 256
    max_depth: int = 8
    albedo_spp: int = 128
    seed: int = 0

    def __post_init__(self):
        room = np.asarray(self.room, dtype=float)
        if room.shape != (3,) or np.any(room <= 0):
            raise ValueError("room must hold three positive extents.")
        if not self.lights:
            raise ValueError("A scene needs at least one light.")
        if self.trajectory not in ("orbit", "random"):
            msg = "Unknown trajectory '{}', expected 'orbit' or " \
                "'random'.".format(self.trajectory)
            raise ValueError(msg)
        for name in ("subdivisions", "number_of_views", "width", "height",
                     "spp", "max_depth", "albedo_spp"):
            if getattr(self, name) < 1:
                raise ValueError("{} must be positive.".format(name))
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180) degrees.")
        low, high = self.camera_height
        if not 0 < low <= high < 1:
            raise ValueError("camera_height must be fractions in (0, 1).")
        missing = sorted(set(_DEFAULT_SURFACES) - set(self.surfaces))
        if missing:
            msg = "Missing room surface(s): {}.".format(", ".join(missing))
            raise ValueError(msg)
        for i, box in enumerate(self.boxes):
            lower = np.asarray(box["min"], dtype=float)
            upper = np.asarray(box["max"], dtype=float)
            if not (np.all(lower < upper) and np.all(lower > 0)
                    and np.all(upper < room)):
                msg = "Box {} must lie strictly inside the room.".format(i)
                raise ValueError(msg)
        for i, light in enumerate(self.lights + self.relight_lights):
            center = np.asarray(light["center"], dtype=float)
            size = np.asarray(light["size"], dtype=float)
            if np.any(center - size / 2 <= 0) or np.any(center + size / 2
                                                        >= 1):
                msg = "Light {} must lie inside the ceiling.".format(i)
                raise ValueError(msg)
            if np.any(np.asarray(light.get("radiance", [1, 1, 1])) < 0):
                raise ValueError("Light radiance must not be negative.")


class SyntheticScene(object):
    """
    Geometry and ground truth of a procedural scene.

    Attributes
    ----------
    mesh : TriangleMesh
    part_labels, semantic_labels : numpy.ndarray[int]
        Per-triangle segment IDs.
    materials : TriangleMaterials
        Ground-truth materials.
    emitters : EmitterSet
        Ground-truth emitters.
    relight_emitters : EmitterSet or None
        Emitters on the relighting fixtures.
    cameras : list[Camera]

    """

    def __init__(self, mesh, part_labels, semantic_labels, materials,
                 emitters, relight_emitters, cameras):
        self.mesh = mesh
        self.part_labels = part_labels
        self.semantic_labels = semantic_labels
        self.materials = materials
        self.emitters = emitters
        self.relight_emitters = relight_emitters
        self.cameras = cameras


class _MeshBuilder(object):
    """Collects quads with per-triangle labels and materials."""

    def __init__(self):
        self.vertices = []
        self.normals = []
        self.triangles = []
        self.parts = []
        self.semantics = []
        self.materials = []
        self.count = 0

    def add_quad(self, origin, edge_u, edge_v, subdivisions, part, semantic,
                 material):
        """Add a tessellated parallelogram; returns its triangle indices."""
        origin = np.asarray(origin, dtype=float)
        edge_u = np.asarray(edge_u, dtype=float)
        edge_v = np.asarray(edge_v, dtype=float)
        normal = np.cross(edge_u, edge_v)
        normal /= np.linalg.norm(normal)

        n = subdivisions
        s, t = np.meshgrid(np.linspace(0, 1, n + 1), np.linspace(0, 1, n + 1),
                           indexing="ij")
        grid = origin + s.reshape(-1, 1) * edge_u + t.reshape(-1, 1) * edge_v
        base = sum(len(v) for v in self.vertices)
        self.vertices.append(grid)
        self.normals.append(np.tile(normal, (len(grid), 1)))

        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        v00 = (i * (n + 1) + j).ravel() + base
        v10 = v00 + (n + 1)
        v01 = v00 + 1
        v11 = v10 + 1
        quads = np.concatenate((np.stack((v00, v10, v11), axis=1),
                                np.stack((v00, v11, v01), axis=1)))
        self.triangles.append(quads)
        self.parts.append(np.full(len(quads), part))
        self.semantics.append(np.full(len(quads), semantic))
        self.materials += [material] * len(quads)
        ids = np.arange(self.count, self.count + len(quads))
        self.count += len(quads)
        return ids

    def add_box(self, lower, upper, subdivisions, part, semantic, material):
        """Add an outward-facing box."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        size = upper - lower
        ex, ey, ez = np.diag(size)
        faces = ((lower, ez, ey), (lower + ex, ey, ez),
                 (lower, ex, ez), (lower + ey, ez, ex),
                 (lower, ey, ex), (lower + ez, ex, ey))
        for origin, u, v in faces:
            self.add_quad(origin, u, v, subdivisions, part, semantic,
                          material)

    def mesh(self):
        return TriangleMesh(np.concatenate(self.vertices),
                            np.concatenate(self.normals),
                            np.concatenate(self.triangles))


def _room_quad(room, axis, side):
    """Origin and edges of an inward-facing room face."""
    others = [a for a in range(3) if a != axis]
    origin = np.zeros(3)
    origin[axis] = room[axis] * side
    edge_u = np.zeros(3)
    edge_v = np.zeros(3)
    edge_u[others[0]] = room[others[0]]
    edge_v[others[1]] = room[others[1]]
    inward = np.zeros(3)
    inward[axis] = 1.0 if side == 0 else -1.0
    if np.dot(np.cross(edge_u, edge_v), inward) < 0:
        edge_u, edge_v = edge_v, edge_u
    return origin, edge_u, edge_v


def _light_quad(room, light):
    """Downward-facing quad just below the ceiling."""
    center = np.asarray(light["center"], dtype=float)
    size = np.asarray(light["size"], dtype=float)
    y = room[1] * (1.0 - 1e-3)
    x0 = (center[0] - size[0] / 2) * room[0]
    z0 = (center[1] - size[1] / 2) * room[2]
    # ex x ez points down
    return (np.array([x0, y, z0]), np.array([size[0] * room[0], 0.0, 0.0]),
            np.array([0.0, 0.0, size[1] * room[2]]))


def _cameras(spec, room):
    rng = np.random.default_rng([spec.seed, 1])
    fx = 0.5 * spec.width / np.tan(np.radians(spec.fov) / 2)
    center = room / 2
    low, high = spec.camera_height
    cameras = []
    for k in range(spec.number_of_views):
        if spec.trajectory == "orbit":
            angle = 2 * np.pi * k / spec.number_of_views
            radius = 0.3 * min(room[0], room[2])
            eye = center + radius * np.array([np.cos(angle), 0.0,
                                              np.sin(angle)])
            eye[1] = room[1] * 0.5 * (low + high)
            target = center - 0.8 * (eye - center)
            target[1] = room[1] * 0.4
        else:
            margin = 0.15 * room
            eye = rng.uniform(margin, room - margin)
            eye[1] = room[1] * rng.uniform(low, high)
            to_center = center - eye
            yaw = np.arctan2(to_center[2], to_center[0]) \
                + np.radians(rng.uniform(-60.0, 60.0))
            pitch = np.radians(rng.uniform(-45.0, 45.0))
            direction = np.array([np.cos(pitch) * np.cos(yaw),
                                  np.sin(pitch),
                                  np.cos(pitch) * np.sin(yaw)])
            target = eye + direction
        cameras.append(Camera.look_at(eye, target, fx, fx, spec.width,
                                      spec.height))
    return cameras


def build_synthetic(spec):
    """
    Build geometry, ground truth and cameras of a spec without rendering.

    Part IDs number the room faces, boxes, lights and fixtures in this
    order starting at 1.

    Returns
    -------
    SyntheticScene

    """
    room = np.asarray(spec.room, dtype=float)
    builder = _MeshBuilder()
    part = 0
    for name, axis, side, semantic in _ROOM_FACES:
        part += 1
        origin, u, v = _room_quad(room, axis, side)
        builder.add_quad(origin, u, v, spec.subdivisions, part, semantic,
                         spec.surfaces[name])
    for box in spec.boxes:
        part += 1
        builder.add_box(box["min"], box["max"], 1, part, FURNITURE_CLASS,
                        box["material"])

    light_triangles, light_radiance = [], []
    for light in spec.lights:
        part += 1
        ids = builder.add_quad(*_light_quad(room, light), 1, part,
                               LIGHT_CLASS, _FIXTURE)
        light_triangles.append(ids)
        light_radiance.append(np.tile(light["radiance"], (len(ids), 1)))
    fixture_triangles, fixture_radiance = [], []
    for light in spec.relight_lights:
        part += 1
        ids = builder.add_quad(*_light_quad(room, light), 1, part,
                               LIGHT_CLASS, _FIXTURE)
        fixture_triangles.append(ids)
        fixture_radiance.append(np.tile(light.get("radiance", [5, 5, 5]),
                                        (len(ids), 1)))

    mesh = builder.mesh()
    materials = TriangleMaterials(
        [mat["a"] for mat in builder.materials],
        [mat["m"] for mat in builder.materials],
        [mat["sigma"] for mat in builder.materials],
        [mat.get("checker_a", mat["a"]) for mat in builder.materials],
        [mat.get("checker_size", 0.0) for mat in builder.materials],
        mesh.face_normals)
    emitters = EmitterSet(np.concatenate(light_triangles),
                          np.concatenate(light_radiance),
                          number_of_triangles=len(mesh))
    relight = None
    if fixture_triangles:
        relight = EmitterSet(np.concatenate(fixture_triangles),
                             np.concatenate(fixture_radiance),
                             number_of_triangles=len(mesh))
    return SyntheticScene(mesh, np.concatenate(builder.parts),
                          np.concatenate(builder.semantics), materials,
                          emitters, relight, _cameras(spec, room))


def gen_synthetic(spec, folder, workers=1):
    """
    Render a procedural scene and write it with ground-truth maps.

    Output layout below ``folder``: the scene written by ``save_scene``,
    ``spec.json``, and ``gt/`` with ``materials.json``,
    ``emitters.json``, ``relight/emitters.json`` when relighting
    fixtures exist, and ``view_{i}/{map}.pfm`` for the maps of
    ``predict_maps``.

    Parameters
    ----------
    spec : GtSceneSpec
        The scene description.
    folder : str
        Output folder.
    workers : int, optional
        Threads used by the path tracer. Default: ``1``.

    Returns
    -------
    tuple[Scene, SyntheticScene]
        The captured scene and its ground truth.

    """
    truth = build_synthetic(spec)
    bvh = build_bvh(truth.mesh)
    config = RenderConfig(spp=spec.spp, max_depth=spec.max_depth,
                          seed=spec.seed, workers=workers)

    frames = []
    for view, camera in enumerate(truth.cameras):
        frames.append(path_trace(truth.mesh, truth.materials, truth.emitters,
                                 camera, config, bvh, stream=view))
        logger.info("Rendered view %d of %d", view + 1, len(truth.cameras))

    scene = Scene(truth.mesh, truth.cameras, frames, truth.part_labels,
                  truth.semantic_labels)
    save_scene(scene, folder)
    fileio.write_json(path.join(folder, "spec.json"), spec.to_dict())

    gt_folder = path.join(folder, "gt")
    save_materials(truth.materials, path.join(gt_folder, "materials.json"))
    save_emitters(truth.emitters, gt_folder)
    if truth.relight_emitters is not None:
        save_emitters(truth.relight_emitters, path.join(gt_folder,
                                                        "relight"))
    for view, camera in enumerate(truth.cameras):
        maps = predict_maps(truth.mesh, truth.materials, truth.emitters,
                            camera, bvh, spec.albedo_spp, spec.seed, view)
        for name in GT_MAPS:
            fileio.write_pfm(maps[name], path.join(
                gt_folder, "view_{}".format(view), name + ".pfm"))
    return scene, truth


def load_spec(file_name):
    """Read a ``GtSceneSpec`` from JSON."""
    return GtSceneSpec.from_dict(fileio.read_json(file_name))
