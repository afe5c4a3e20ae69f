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
Forward path tracing with estimated or known materials.

The path tracer combines BRDF importance sampling with next-event
estimation towards the emitter triangles. Emitters show their radiance
and reflect nothing. Materials come from a material source, i.e. any
object with a method ``brdf(positions, triangles)`` returning
``BrdfParams``:

- ``FieldMaterials`` evaluates an estimated ``BrdfField``
- ``TriangleMaterials`` holds constants or checker textures per triangle
- ``CompositeMaterials`` joins two sources for object insertion

"""
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from fipt import brdf
from fipt.brdf import BrdfParams
from fipt.configuration import ConfigMixin
from fipt.constants import DIFFUSE_THRESHOLD, METRIC_GAMMA
from fipt.emitter import EmitterSet
from fipt.fileio import HdrImage, read_json, write_json
from fipt.geometry import (build_bvh, camera_rays, intersect, offset_epsilon,
                           primary_ray)
from fipt.transport import (TransportContext, incident_radiance,
                            merge_stats, new_stats, sample_lights)

logger = logging.getLogger(__name__)


@dataclass
class RenderConfig(ConfigMixin):
    """Settings of the forward path tracer."""
    spp: int = 64
    max_depth: int = 8
    rr_start_depth: int = 3
    throughput_clamp: Optional[float] = None
    mis: bool = True
    seed: int = 0
    gamma: float = METRIC_GAMMA
    tile_size: int = 32
    workers: int = 1

    def __post_init__(self):
        if self.spp < 1:
            raise ValueError("spp must be at least 1.")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1.")
        if self.tile_size < 1 or self.workers < 1:
            raise ValueError("tile_size and workers must be positive.")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive.")


class FieldMaterials(object):
    """Materials queried from an estimated ``BrdfField``."""

    def __init__(self, field):
        self.field = field

    def brdf(self, positions, triangles):
        a, m, sigma = self.field.query(positions)
        return BrdfParams(np.clip(a, 0.0, 1.0), np.clip(m, 0.0, 1.0),
                          np.clip(sigma, 0.0, 1.0), validate=False)


class TriangleMaterials(object):
    """
    Constant materials per triangle with optional checker textures.

    A checker alternates between ``a`` and ``checker_a`` in cubic cells
    of edge length ``checker_size``. The cells are counted in the two
    axes spanned by the triangle's plane, so coplanar points never
    flip parity through rounding across the plane.

    Parameters
    ----------
    a : ArrayLike[float]
        Base color per triangle, shape (T, 3).
    m, sigma : ArrayLike[float]
        Metallic and roughness per triangle, shape (T,).
    checker_a : ArrayLike[float], optional
        Second base color per triangle, shape (T, 3).
    checker_size : ArrayLike[float], optional
        Checker cell size per triangle, ``0`` disables the checker.
    face_normals : ArrayLike[float], optional
        Normals used to pick the checker axes. Required with checkers.

    """

    def __init__(self, a, m, sigma, checker_a=None, checker_size=None,
                 face_normals=None):
        self.a = np.asarray(a, dtype=float).reshape(-1, 3)
        count = len(self.a)
        self.m = np.broadcast_to(np.asarray(m, dtype=float), (count,)).copy()
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=float),
                                     (count,)).copy()
        self.checker_size = np.zeros(count) if checker_size is None \
            else np.broadcast_to(np.asarray(checker_size, dtype=float),
                                 (count,)).copy()
        self.checker_a = self.a.copy() if checker_a is None \
            else np.asarray(checker_a, dtype=float).reshape(count, 3)
        BrdfParams(np.concatenate((self.a, self.checker_a)),
                   np.concatenate((self.m, self.m)),
                   np.concatenate((self.sigma, self.sigma)))

        self.checker_axes = np.zeros((count, 2), dtype=np.int64)
        if np.any(self.checker_size > 0):
            if face_normals is None:
                raise ValueError("Checker textures need face normals.")
            dominant = np.argmax(np.abs(np.asarray(face_normals)), axis=1)
            self.checker_axes = np.array([[1, 2], [0, 2], [0, 1]])[dominant]

    def __len__(self):
        return len(self.a)

    @classmethod
    def constant(cls, number_of_triangles, a, m, sigma):
        """One material on all triangles."""
        return cls(np.tile(np.asarray(a, dtype=float),
                           (number_of_triangles, 1)), m, sigma)

    def brdf(self, positions, triangles):
        triangles = np.asarray(triangles, dtype=np.int64)
        a = self.a[triangles]
        size = self.checker_size[triangles]
        textured = size > 0
        if np.any(textured):
            axes = self.checker_axes[triangles[textured]]
            p = np.take_along_axis(np.asarray(positions)[textured], axes,
                                   axis=1)
            cells = np.floor(p / size[textured][:, None]).astype(np.int64)
            odd = (cells.sum(axis=1) % 2) == 1
            ids = np.flatnonzero(textured)[odd]
            a[ids] = self.checker_a[triangles[ids]]
        return BrdfParams(a, self.m[triangles], self.sigma[triangles],
                          validate=False)

    def to_dict(self):
        """JSON representation, see ``from_dict``."""
        return {"a": self.a.tolist(), "m": self.m.tolist(),
                "sigma": self.sigma.tolist(),
                "checker_a": self.checker_a.tolist(),
                "checker_size": self.checker_size.tolist(),
                "checker_axes": self.checker_axes.tolist()}

    @classmethod
    def from_dict(cls, entry):
        materials = cls(entry["a"], entry["m"], entry["sigma"],
                        entry["checker_a"])
        materials.checker_size = np.asarray(entry["checker_size"],
                                            dtype=float)
        materials.checker_axes = np.asarray(entry["checker_axes"],
                                            dtype=np.int64).reshape(-1, 2)
        return materials


def save_materials(materials, file_name):
    """Write ``TriangleMaterials`` as JSON."""
    write_json(file_name, materials.to_dict())


def load_materials(file_name):
    """Read ``TriangleMaterials`` written by ``save_materials``."""
    return TriangleMaterials.from_dict(read_json(file_name))


class CompositeMaterials(object):
    """
    Two material sources on one merged mesh.

    Triangles below ``offset`` use ``first``, the others use ``second``
    with their index shifted by ``offset``.

    """

    def __init__(self, first, second, offset):
        self.first = first
        self.second = second
        self.offset = int(offset)

    def brdf(self, positions, triangles):
        triangles = np.asarray(triangles, dtype=np.int64)
        positions = np.asarray(positions)
        count = len(triangles)
        a = np.zeros((count, 3))
        m = np.zeros(count)
        sigma = np.zeros(count)
        for source, ids, shift in (
                (self.first, np.flatnonzero(triangles < self.offset), 0),
                (self.second, np.flatnonzero(triangles >= self.offset),
                 self.offset)):
            if ids.size:
                params = source.brdf(positions[ids], triangles[ids] - shift)
                a[ids], m[ids], sigma[ids] = params.a, params.m, params.sigma
        return BrdfParams(a, m, sigma, validate=False)


def _tile_pixels(camera, tile_size):
    py, px = np.divmod(np.arange(camera.width * camera.height),
                       camera.width)
    tiles_x = -(-camera.width // tile_size)
    return (py // tile_size) * tiles_x + px // tile_size, px, py


def _trace_tile(ctx, camera, px, py, ids, config, rng):
    """Mean radiance of ``config.spp`` paths through each pixel."""
    count = len(ids)
    total = np.zeros((count, 3))
    stats = new_stats()
    # Pixels whose samples all hit one emitter return its radiance as is
    emitter_hit = np.full(count, -2, dtype=np.int64)

    for _ in range(config.spp):
        rays = primary_ray(camera, px[ids], py[ids], rng.random((count, 2)))
        hits = intersect(ctx.bvh, ctx.mesh, rays)
        radiance = np.zeros((count, 3))
        seen = np.full(count, -1, dtype=np.int64)

        miss = ~hits.valid
        if np.any(miss):
            stats["escapes"] += int(np.count_nonzero(miss))
            radiance[miss] = ctx.emitters.escape_radiance(
                rays.directions[miss])

        emissive = hits.valid & ctx.emitters.is_emitter(hits.triangles)
        radiance[emissive] = ctx.emitters.emission(hits.triangles[emissive])
        seen[emissive] = hits.triangles[emissive]

        surface = np.flatnonzero(hits.valid & ~emissive)
        if surface.size:
            h = hits[surface]
            wo = -rays.directions[surface]
            params = ctx.materials.brdf(h.positions, h.triangles)
            normals = brdf.face_forward(h.normals, wo)
            if ctx.mis:
                light_wi, weight = sample_lights(
                    ctx, h.positions, h.geometric_normals,
                    lambda w: brdf.pdf(params, w, wo, normals), rng)
                radiance[surface] += weight * brdf.eval(params, light_wi, wo,
                                                        normals)
            lobe = brdf.sample(params, wo, normals,
                               rng.random((surface.size, 3)))
            value = brdf.eval(params, lobe.wi, wo, normals)
            alive = lobe.pdf > 0
            if np.any(alive):
                weight = value[alive] / lobe.pdf[alive][:, None]
                radiance[surface[alive]] += weight * incident_radiance(
                    ctx, h.positions[alive], h.geometric_normals[alive],
                    lobe.wi[alive], lobe.pdf[alive], rng, stats,
                    nee_at_origin=ctx.mis, max_depth=config.max_depth - 1)

        total += radiance
        emitter_hit = np.where(emitter_hit == -2, seen,
                               np.where(emitter_hit == seen, seen, -1))

    mean = total / config.spp
    pure = emitter_hit >= 0
    mean[pure] = ctx.emitters.emission(emitter_hit[pure])
    return mean, stats


def path_trace(mesh, materials, emitters, camera, config=None, bvh=None,
               stream=0, stats=None):
    """
    Render one camera by path tracing.

    Parameters
    ----------
    mesh : TriangleMesh
        The scene geometry.
    materials : object
        Material source with ``brdf(positions, triangles)``.
    emitters : EmitterSet
        Emitting triangles and an optional environment map.
    camera : Camera
        The view to render.
    config : RenderConfig, optional
        Sample counts and path settings. Default: ``RenderConfig()``.
    bvh : Bvh, optional
        Hierarchy of ``mesh``, built if not given.
    stream : int, optional
        Index mixed into the random streams, e.g. the view index, so that
        views do not share random numbers. Default: ``0``.
    stats : dict, optional
        Updated in place with escape and cache counters.

    Returns
    -------
    HdrImage
        Linear radiance.

    """
    config = config or RenderConfig()
    if len(emitters) == 0 and emitters.environment is None:
        raise ValueError("Nothing emits light: the emitter set is empty "
                         "and has no environment.")
    bvh = bvh if bvh is not None else build_bvh(mesh)
    ctx = TransportContext(mesh, bvh, materials, emitters,
                           offset_epsilon(mesh.diagonal()),
                           max_depth=config.max_depth,
                           rr_start_depth=config.rr_start_depth,
                           throughput_clamp=config.throughput_clamp,
                           mis=config.mis)

    tiles, px, py = _tile_pixels(camera, config.tile_size)

    def render_tile(tile):
        ids = np.flatnonzero(tiles == tile)
        rng = np.random.default_rng([config.seed, stream, int(tile)])
        mean, tile_stats = _trace_tile(ctx, camera, px, py, ids, config, rng)
        return ids, mean, tile_stats

    tile_list = np.unique(tiles)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            results = list(executor.map(render_tile, tile_list))
    else:
        results = [render_tile(tile) for tile in tile_list]

    image = np.zeros((camera.width * camera.height, 3))
    render_stats = new_stats()
    for ids, mean, tile_stats in results:
        image[ids] = mean
        merge_stats(render_stats, tile_stats)

    if render_stats["escapes"] and emitters.environment is None:
        msg = "{} rays escaped a scene without environment map.".format(
            render_stats["escapes"])
        warnings.warn(msg)
    logger.info("Rendered %dx%d at %d spp, %d escapes", camera.width,
                camera.height, config.spp, render_stats["escapes"])
    if stats is not None:
        merge_stats(stats, render_stats)
    return HdrImage(image.reshape(camera.height, camera.width, 3))


def render_views(scene, materials, emitters, config=None, bvh=None,
                 views=None):
    """Path trace several views of a scene, one random stream each."""
    bvh = bvh if bvh is not None else build_bvh(scene.mesh)
    views = range(scene.number_of_views) if views is None else views
    return [path_trace(scene.mesh, materials, emitters, scene.cameras[v],
                       config, bvh, stream=v) for v in views]


def insert_object(scene, materials, emitters, extra_mesh, extra_params,
                  camera, config=None, extra_emitters=None):
    """
    Render a scene with an additional object.

    Parameters
    ----------
    scene : Scene
        The reconstructed scene.
    materials : object
        Material source of the scene triangles.
    emitters : EmitterSet
        Emitters of the scene.
    extra_mesh : TriangleMesh
        Geometry to insert. Overlaps and degenerate triangles are allowed.
    extra_params : BrdfParams
        One material per inserted triangle.
    camera : Camera
        The view to render.
    config : RenderConfig, optional
        Path tracer settings.
    extra_emitters : tuple, optional
        ``(triangles, radiance)`` of inserted triangles that emit, with
        triangle indices local to ``extra_mesh``.

    Returns
    -------
    HdrImage
        The render of the merged scene.

    """
    offset = len(scene.mesh)
    mesh = scene.mesh.merged(extra_mesh, validate=False)
    extra = TriangleMaterials(extra_params.a, extra_params.m,
                              extra_params.sigma)
    union = CompositeMaterials(materials, extra, offset)
    if extra_emitters is not None:
        triangles, radiance = extra_emitters
        emitters = EmitterSet(
            np.concatenate((emitters.triangles,
                            np.asarray(triangles, dtype=np.int64) + offset)),
            np.concatenate((emitters.radiance,
                            np.asarray(radiance, dtype=float).reshape(-1, 3))),
            emitters.environment, len(mesh))
    return path_trace(mesh, union, emitters, camera, config)


def predict_maps(mesh, materials, emitters, camera, bvh=None, spp=128,
                 seed=0, stream=0):
    """
    Per-pixel material and emission maps of one view.

    Parameters
    ----------
    mesh : TriangleMesh
        The scene geometry.
    materials : object
        Material source with ``brdf(positions, triangles)``.
    emitters : EmitterSet
        Emitters defining the emission mask and radiance maps.
    camera : Camera
        The view.
    bvh : Bvh, optional
        Hierarchy of ``mesh``.
    spp : int, optional
        Samples per pixel of the albedo estimate. Default: ``128``.

    Returns
    -------
    dict
        Arrays of shape (height, width, 3) under the keys ``'kd'``,
        ``'albedo'`` (the directional albedo ``int f cos``),
        ``'roughness'``, ``'metallic'``, ``'emission_mask'`` and
        ``'emission'``, plus the boolean ``'hit'`` and ``'diffuse'``
        masks of shape (height, width). Scalar maps are repeated over the
        channels. Pixels without a hit are zero.

    """
    bvh = bvh if bvh is not None else build_bvh(mesh)
    rays = camera_rays(camera)
    hits = intersect(bvh, mesh, rays)
    pixels = camera.width * camera.height
    maps = {k: np.zeros((pixels, 3)) for k in
            ("kd", "albedo", "roughness", "metallic", "emission_mask",
             "emission")}
    diffuse = np.zeros(pixels, dtype=bool)

    ids = np.flatnonzero(hits.valid)
    if ids.size:
        h = hits[ids]
        params = materials.brdf(h.positions, h.triangles)
        k_d, _ = params.coefficients()
        emissive = emitters.is_emitter(h.triangles)
        wo = -rays.directions[ids]
        normals = brdf.face_forward(h.normals, wo)
        rng = np.random.default_rng([seed, stream])
        albedo = brdf.reflectance(params, wo, normals, rng, spp)

        maps["kd"][ids] = k_d
        maps["albedo"][ids] = np.where(emissive[:, None], 0.0, albedo)
        maps["roughness"][ids] = params.sigma[:, None]
        maps["metallic"][ids] = params.m[:, None]
        maps["emission_mask"][ids] = emissive[:, None]
        maps["emission"][ids] = emitters.emission(h.triangles)
        diffuse[ids] = (params.m < 1e-6) \
            & (params.sigma > DIFFUSE_THRESHOLD) & ~emissive

    shape = (camera.height, camera.width)
    maps = {k: v.reshape(shape + (3,)) for k, v in maps.items()}
    maps["hit"] = hits.valid.reshape(shape)
    maps["diffuse"] = diffuse.reshape(shape)
    return maps
