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
Diffuse and specular shading buffers.

For every pixel with a primary hit, the reflected radiance is factored
into material-independent integrals: one diffuse shading ``L_d`` and two
specular shadings ``L_s0``, ``L_s1`` at six roughness levels. Given base
color, metallic and roughness, the pixel radiance is recovered as
``k_d L_d + k_s L_s0(sigma) + L_s1(sigma)`` with linear interpolation
between roughness levels.

Buffers are first baked with one bounce into the radiance cache and
later refined by growing paths through glossy surfaces.

"""
import logging
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from os import path
from typing import Optional

import numpy as np

from fipt import brdf, fileio
from fipt.configuration import ConfigMixin
from fipt.constants import (DIELECTRIC_F0, DIFFUSE_THRESHOLD,
                            FILE_BYTE_ORDER_CHAR, ROUGHNESS_LEVELS,
                            SIGMA_MIN)
from fipt.geometry import (Rays, camera_rays, intersect, offset_epsilon,
                           offset_origin)
from fipt.transport import (TransportContext, incident_radiance,
                            merge_stats, new_stats, sample_lights)

logger = logging.getLogger(__name__)

NUMBER_OF_LEVELS = len(ROUGHNESS_LEVELS)
HITS_MAGIC = b"FIPTHIT1"
_HIT_RECORD = np.dtype([("tri", FILE_BYTE_ORDER_CHAR + "i8"),
                        ("pos", FILE_BYTE_ORDER_CHAR + "f4", (3,)),
                        ("normal", FILE_BYTE_ORDER_CHAR + "f4", (3,))])


@dataclass
class BakeConfig(ConfigMixin):
    """Sample counts and path settings of shading bakes."""
    spp_diffuse: int = 128
    spp_specular: int = 64
    max_path_depth: int = 8
    diffuse_threshold: float = DIFFUSE_THRESHOLD
    rr_start_depth: int = 3
    throughput_clamp: Optional[float] = 20.0
    denoise: bool = True
    denoise_sigma_normal: float = 0.5
    denoise_sigma_position: float = 0.01
    seed: int = 0
    tile_size: int = 32
    workers: int = 1
    use_radiance_cache: bool = True
    mis: bool = True

    def __post_init__(self):
        if self.spp_diffuse < 1 or self.spp_specular < 1:
            raise ValueError("Samples per pixel must be positive.")
        if not 0.0 < self.diffuse_threshold < 1.0:
            raise ValueError("diffuse_threshold must be in (0, 1).")
        if self.max_path_depth < 1:
            raise ValueError("max_path_depth must be at least 1.")
        if self.tile_size < 1 or self.workers < 1:
            raise ValueError("tile_size and workers must be positive.")
        if self.throughput_clamp is not None and self.throughput_clamp <= 0:
            raise ValueError("throughput_clamp must be positive.")


class ViewShading(object):
    """
    Shading buffers and primary hits of one view.

    All per-pixel arrays are flattened in row-major pixel order and
    stored in single precision.

    Attributes
    ----------
    width, height : int
        Resolution of the view.
    ld : numpy.ndarray[float32]
        Diffuse shading, shape (pixels, 3).
    ls0, ls1 : numpy.ndarray[float32]
        Specular shadings per roughness level, shape (6, pixels, 3).
    triangles : numpy.ndarray[int]
        Primary-hit triangle per pixel, ``-1`` where nothing was hit.
    positions, normals : numpy.ndarray[float32]
        Primary-hit positions and shading normals.
    stats : dict
        Diagnostics of the bake.

    """

    def __init__(self, width, height, ld, ls0, ls1, triangles, positions,
                 normals, stats=None):
        pixels = width * height
        self.width = int(width)
        self.height = int(height)
        self.ld = np.asarray(ld, dtype=np.float32).reshape(pixels, 3)
        self.ls0 = np.asarray(ls0, dtype=np.float32).reshape(
            NUMBER_OF_LEVELS, pixels, 3)
        self.ls1 = np.asarray(ls1, dtype=np.float32).reshape(
            NUMBER_OF_LEVELS, pixels, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(
            pixels)
        self.positions = np.asarray(positions, dtype=np.float32).reshape(
            pixels, 3)
        self.normals = np.asarray(normals, dtype=np.float32).reshape(
            pixels, 3)
        self.stats = dict(stats or {})

    @property
    def valid(self):
        """Mask of pixels with a primary hit."""
        return self.triangles >= 0

    def image(self, buffer):
        """Reshape a flat buffer to (height, width, 3)."""
        return np.asarray(buffer).reshape(self.height, self.width, 3)


class ShadingBuffers(object):
    """
    Shading buffers of all views.

    Parameters
    ----------
    views : Sequence[ViewShading]
        One entry per view of the scene.
    levels : ArrayLike[float], optional
        Roughness levels of the specular buffers, which must be the six
        levels ``linspace(0, 1, 6)``.

    """

    def __init__(self, views, levels=ROUGHNESS_LEVELS):
        if not np.allclose(levels, ROUGHNESS_LEVELS, rtol=0, atol=1e-12):
            raise ValueError("Shading levels must be linspace(0, 1, 6).")
        self._views = list(views)
        self._levels = np.asarray(ROUGHNESS_LEVELS)

    @property
    def views(self):
        """Per-view buffers."""
        return self._views

    @property
    def levels(self):
        """Roughness levels of the specular buffers."""
        return self._levels

    def __len__(self):
        return len(self._views)

    def __getitem__(self, view):
        return self._views[view]

    def stats(self):
        """Diagnostics of all views."""
        return [dict(v.stats) for v in self._views]


def _tile_ids(width, height, tile_size):
    py, px = np.divmod(np.arange(width * height), width)
    tiles_x = -(-width // tile_size)
    return (py // tile_size) * tiles_x + px // tile_size


def _cached_radiance(ctx, positions, geometric_normals, wi, stats):
    """One bounce into the radiance cache."""
    result = np.zeros((len(positions), 3))
    if len(positions) == 0:
        return result
    origins = offset_origin(positions, geometric_normals, wi, ctx.epsilon)
    hits = intersect(ctx.bvh, ctx.mesh, Rays(origins, wi))
    hit = hits.valid
    stats["escapes"] += int(np.count_nonzero(~hit))
    values, found = ctx.cache.query(hits.positions[hit])
    stats["cache_queries"] += int(np.count_nonzero(hit))
    stats["cache_misses"] += int(np.count_nonzero(~found))
    result[hit] = values
    return result


def _shade_points(ctx, positions, normals, geometric_normals, wo, rng,
                  config, stats, grow_paths):
    """Estimate the diffuse and specular shadings of shading points."""
    count = len(positions)
    ld = np.zeros((count, 3))
    ls0 = np.zeros((NUMBER_OF_LEVELS, count, 3))
    ls1 = np.zeros((NUMBER_OF_LEVELS, count, 3))
    if count == 0:
        return ld, ls0, ls1

    normals = brdf.face_forward(normals, wo)
    nee = grow_paths and ctx.mis

    def radiance(ids, wi, pdf):
        if grow_paths:
            return incident_radiance(ctx, positions[ids],
                                     geometric_normals[ids], wi, pdf, rng,
                                     stats)
        return _cached_radiance(ctx, positions[ids], geometric_normals[ids],
                                wi, stats)

    # Diffuse shading
    spp = config.spp_diffuse
    rep = np.repeat(np.arange(count), spp)
    n, v = normals[rep], wo[rep]
    wi = brdf.sample_cosine(n, rng.random((rep.size, 2)))
    pdf = brdf.pdf_cosine(wi, n)
    g_d = brdf.eval_factored(1.0, wi, v, n)[0]
    valid = (pdf > 0) & (g_d > 0)
    contribution = np.zeros((rep.size, 3))
    contribution[valid] = (g_d[valid] / pdf[valid])[:, None] \
        * radiance(rep[valid], wi[valid], pdf[valid])
    if nee:
        light_wi, weight = sample_lights(
            ctx, positions[rep], geometric_normals[rep],
            lambda w: brdf.pdf_cosine(w, n), rng)
        contribution += weight * brdf.eval_factored(1.0, light_wi, v,
                                                    n)[0][:, None]
    ld[:] = contribution.reshape(count, spp, 3).mean(axis=1)

    # Specular shadings per roughness level
    spp = config.spp_specular
    rep = np.repeat(np.arange(count), spp)
    n, v = normals[rep], wo[rep]
    for level, sigma in enumerate(ROUGHNESS_LEVELS):
        alpha = np.full(rep.size, max(sigma, SIGMA_MIN) ** 2)
        wi = brdf.sample_ggx_vndf(v, n, alpha, rng.random((rep.size, 2)))
        pdf = brdf.pdf_ggx_vndf(wi, v, n, alpha)
        _, g_s0, g_s1 = brdf.eval_factored(sigma, wi, v, n)
        valid = (pdf > 0) & (g_s0 + g_s1 > 0)

        incident = np.zeros((rep.size, 3))
        incident[valid] = radiance(rep[valid], wi[valid], pdf[valid])
        safe_pdf = np.where(valid, pdf, 1.0)
        c0 = (np.where(valid, g_s0, 0.0) / safe_pdf)[:, None] * incident
        c1 = (np.where(valid, g_s1, 0.0) / safe_pdf)[:, None] * incident

        if nee:
            light_wi, weight = sample_lights(
                ctx, positions[rep], geometric_normals[rep],
                lambda w: brdf.pdf_ggx_vndf(w, v, n, alpha), rng)
            _, l0, l1 = brdf.eval_factored(sigma, light_wi, v, n)
            c0 += weight * l0[:, None]
            c1 += weight * l1[:, None]

        ls0[level] = c0.reshape(count, spp, 3).mean(axis=1)
        ls1[level] = c1.reshape(count, spp, 3).mean(axis=1)

    return ld, ls0, ls1


def _bake_view(scene, bvh, ctx, view, config, grow_paths, skip_triangles):
    camera = scene.cameras[view]
    rays = camera_rays(camera)
    hits = intersect(bvh, scene.mesh, rays)
    pixels = camera.width * camera.height

    ld = np.zeros((pixels, 3))
    ls0 = np.zeros((NUMBER_OF_LEVELS, pixels, 3))
    ls1 = np.zeros((NUMBER_OF_LEVELS, pixels, 3))

    shade = hits.valid
    if skip_triangles is not None:
        shade &= ~skip_triangles(hits.triangles)
    tiles = _tile_ids(camera.width, camera.height, config.tile_size)

    def bake_tile(tile):
        ids = np.flatnonzero(shade & (tiles == tile))
        rng = np.random.default_rng([config.seed, view, int(tile)])
        stats = new_stats()
        values = _shade_points(ctx, hits.positions[ids], hits.normals[ids],
                               hits.geometric_normals[ids],
                               -rays.directions[ids], rng, config, stats,
                               grow_paths)
        return ids, values, stats

    tile_list = np.unique(tiles[shade])
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            results = list(executor.map(bake_tile, tile_list))
    else:
        results = [bake_tile(tile) for tile in tile_list]

    stats = new_stats()
    for ids, (tile_ld, tile_ls0, tile_ls1), tile_stats in results:
        ld[ids] = tile_ld
        ls0[:, ids] = tile_ls0
        ls1[:, ids] = tile_ls1
        merge_stats(stats, tile_stats)

    buffers = [ld] + list(ls0) + list(ls1)
    non_finite = sum(int(np.count_nonzero(~np.isfinite(b))) for b in buffers)
    if non_finite:
        logger.warning("view %d: zeroed %d non-finite shading values", view,
                       non_finite)
    buffers = [np.maximum(np.nan_to_num(b, nan=0.0, posinf=0.0), 0.0)
               for b in buffers]

    if config.denoise:
        mask = hits.valid.reshape(camera.height, camera.width)
        guide_n = hits.normals.reshape(camera.height, camera.width, 3)
        guide_p = hits.positions.reshape(camera.height, camera.width, 3)
        sigma_p = config.denoise_sigma_position * scene.diagonal()
        buffers = [atrous_denoise(b.reshape(camera.height, camera.width, 3),
                                  guide_n, guide_p, mask,
                                  config.denoise_sigma_normal, sigma_p)
                   .reshape(pixels, 3) for b in buffers]

    queries = max(stats["cache_queries"], 1)
    stats["cache_miss_rate"] = stats["cache_misses"] / queries
    stats["shaded_pixels"] = int(np.count_nonzero(shade))
    if stats["cache_miss_rate"] > 0.1:
        msg = "View {}: {:.1%} of radiance cache queries missed.".format(
            view, stats["cache_miss_rate"])
        warnings.warn(msg)
    logger.info("view %d: %d pixels shaded, cache miss rate %.4f, "
                "%d escapes", view, stats["shaded_pixels"],
                stats["cache_miss_rate"], stats["escapes"])

    return ViewShading(camera.width, camera.height, buffers[0],
                       np.stack(buffers[1:1 + NUMBER_OF_LEVELS]),
                       np.stack(buffers[1 + NUMBER_OF_LEVELS:]),
                       hits.triangles, hits.positions, hits.normals, stats)


def bake_initial(scene, bvh, cache, config=None):
    """
    Bake shading buffers with one bounce into the radiance cache.

    For each pixel with a primary hit, incident directions are sampled
    from the cosine lobe (diffuse) or the GGX lobe of each roughness
    level (specular); the radiance arriving along them is read from the
    cache at the next surface hit. Cache misses and escaping rays
    contribute zero and are counted per view.

    Parameters
    ----------
    scene : Scene
        The input captures.
    bvh : Bvh
        Hierarchy of the scene mesh.
    cache : RadianceCache
        Surface radiance.
    config : BakeConfig, optional
        Sample counts and denoising. Default: ``BakeConfig()``.

    Returns
    -------
    ShadingBuffers
        Buffers of all views.

    """
    config = config or BakeConfig()
    ctx = TransportContext(scene.mesh, bvh, None, None,
                           offset_epsilon(scene.diagonal()), cache=cache)
    views = [_bake_view(scene, bvh, ctx, view, config, False, None)
             for view in range(scene.number_of_views)]
    return ShadingBuffers(views)


def refine(scene, bvh, cache, materials, emitters, config=None):
    """
    Refine shading buffers by growing paths through glossy surfaces.

    Paths continue while they hit non-emissive surfaces with roughness
    at most ``config.diffuse_threshold`` under the current material
    estimate. They end with the emitted radiance at emitters, with the
    cached radiance at rougher surfaces or at the depth limit, and with
    the environment when leaving the scene. Emitters are additionally
    sampled directly, combined by multiple importance sampling. Pixels
    that see an emitter are not shaded.

    Parameters
    ----------
    scene : Scene
        The input captures.
    bvh : Bvh
        Hierarchy of the scene mesh.
    cache : RadianceCache
        Surface radiance. Ignored if ``config.use_radiance_cache`` is
        ``False``; paths then end only at emitters, escapes or the depth
        limit.
    materials : object
        Material source with ``brdf(positions, triangles)``.
    emitters : EmitterSet
        The current emitters.
    config : BakeConfig, optional
        Sample counts and path settings. Default: ``BakeConfig()``.

    Returns
    -------
    ShadingBuffers
        Refined buffers of all views.

    """
    config = config or BakeConfig()
    ctx = TransportContext(
        scene.mesh, bvh, materials, emitters,
        offset_epsilon(scene.diagonal()),
        cache=cache if config.use_radiance_cache else None,
        diffuse_threshold=config.diffuse_threshold,
        max_depth=config.max_path_depth,
        rr_start_depth=config.rr_start_depth,
        throughput_clamp=config.throughput_clamp, mis=config.mis)
    views = [_bake_view(scene, bvh, ctx, view, config, True,
                        emitters.is_emitter)
             for view in range(scene.number_of_views)]
    return ShadingBuffers(views)


def _level_weights(sigma):
    """Lower level index and interpolation weight for roughness values."""
    t = np.clip(np.asarray(sigma, dtype=float), 0.0, 1.0) \
        * (NUMBER_OF_LEVELS - 1)
    nearest = np.round(t)
    t = np.where(np.abs(t - nearest) < 1e-9, nearest, t)
    lower = np.clip(np.nan_to_num(np.floor(t)), 0,
                    NUMBER_OF_LEVELS - 2).astype(np.int64)
    return lower, t - lower


def _lerp(buffers, pixels, lower, weight):
    below = buffers[lower, pixels].astype(float)
    above = buffers[lower + 1, pixels].astype(float)
    value = below + weight[:, None] * (above - below)
    slope = (NUMBER_OF_LEVELS - 1) * (above - below)
    return value, slope


def lerp_specular(shading, pixels, sigma):
    """
    Interpolate the specular shadings between roughness levels.

    Parameters
    ----------
    shading : ViewShading
        Buffers of one view.
    pixels : ArrayLike[int]
        Flat pixel indices.
    sigma : ArrayLike[float]
        Roughness per pixel.

    Returns
    -------
    ls0, ls1 : numpy.ndarray[float]
        Interpolated shadings, exact at the levels.

    """
    pixels = np.atleast_1d(pixels)
    lower, weight = _level_weights(np.broadcast_to(sigma, pixels.shape))
    return (_lerp(shading.ls0, pixels, lower, weight)[0],
            _lerp(shading.ls1, pixels, lower, weight)[0])


def factorized_render(shading, pixels, a, m, sigma, gradients=False):
    """
    Render pixels from shadings and material parameters.

    Parameters
    ----------
    shading : ViewShading
        Buffers of one view.
    pixels : ArrayLike[int]
        Flat pixel indices with a primary hit.
    a : ArrayLike[float]
        Base color per pixel, shape (n, 3).
    m, sigma : ArrayLike[float]
        Metallic and roughness per pixel, shape (n,).
    gradients : bool, optional
        If ``True``, partial derivatives are returned as well.

    Returns
    -------
    radiance : numpy.ndarray[float]
        ``k_d L_d + k_s L_s0(sigma) + L_s1(sigma)``, shape (n, 3).
    partials : tuple[numpy.ndarray[float]], optional
        Derivatives of each channel with respect to the base color of
        the same channel, to metallic and to roughness, each (n, 3).
        Roughness slopes are those of the linear interpolation.

    """
    pixels = np.atleast_1d(pixels)
    a = np.asarray(a)
    m = np.asarray(m)
    lower, weight = _level_weights(sigma)
    ls0, dls0 = _lerp(shading.ls0, pixels, lower, weight)
    ls1, dls1 = _lerp(shading.ls1, pixels, lower, weight)
    ld = shading.ld[pixels].astype(float)

    k_d, k_s = brdf.coeffs(a, m)
    radiance = k_d * ld + k_s * ls0 + ls1
    if not gradients:
        return radiance

    d_a = (1.0 - m)[:, None] * ld + m[:, None] * ls0
    d_m = -a * ld + (a - DIELECTRIC_F0) * ls0
    d_sigma = k_s * dls0 + dls1
    return radiance, (d_a, d_m, d_sigma)


def atrous_denoise(image, normals, positions, mask, sigma_normal=0.5,
                   sigma_position=0.01, step=1):
    """
    One edge-aware a-trous filter pass.

    A 3x3 B-spline kernel with spacing ``step`` is weighted by normal and
    position similarity, so the filter does not blur across geometric
    edges. Pixels outside ``mask`` are neither filtered nor used.

    Parameters
    ----------
    image, normals, positions : numpy.ndarray[float]
        Arrays of shape (height, width, 3).
    mask : numpy.ndarray[bool]
        Pixels with a primary hit, shape (height, width).
    sigma_normal, sigma_position : float, optional
        Widths of the normal and position weights.
    step : int, optional
        Kernel spacing in pixels. Default: ``1``.

    Returns
    -------
    numpy.ndarray[float]
        The filtered image.

    """
    height, width = mask.shape
    kernel = (0.25, 0.5, 0.25)
    pad = ((step, step), (step, step), (0, 0))
    p_image = np.pad(image, pad, mode="edge")
    p_normals = np.pad(normals, pad, mode="edge")
    p_positions = np.pad(positions, pad, mode="edge")
    p_mask = np.pad(mask, step, mode="constant", constant_values=False)

    total = np.zeros(image.shape, dtype=float)
    weights = np.zeros(mask.shape, dtype=float)
    for i, dy in enumerate((-step, 0, step)):
        for j, dx in enumerate((-step, 0, step)):
            window = (slice(step + dy, step + dy + height),
                      slice(step + dx, step + dx + width))
            d_normal = np.sum((p_normals[window] - normals) ** 2, axis=2)
            d_position = np.sum((p_positions[window] - positions) ** 2,
                                axis=2)
            w = (kernel[i] * kernel[j] * p_mask[window]
                 * np.exp(-d_normal / sigma_normal ** 2)
                 * np.exp(-d_position / max(sigma_position, 1e-12) ** 2))
            total += w[:, :, None] * p_image[window]
            weights += w

    filtered = total / np.where(weights > 0, weights, 1.0)[:, :, None]
    return np.where((mask & (weights > 0))[:, :, None], filtered, image)


def save_shading(buffers, folder, config=None):
    """
    Write shading buffers as PFM images plus hit records.

    Layout: ``view_{i}/Ld.pfm``, ``view_{i}/Ls0_{k}.pfm``,
    ``view_{i}/Ls1_{k}.pfm``, ``view_{i}/hits.bin`` and a
    ``manifest.json`` with the bake config and per-view statistics.

    """
    for i, view in enumerate(buffers.views):
        view_folder = path.join(folder, "view_{}".format(i))
        fileio.write_pfm(view.image(view.ld), path.join(view_folder,
                                                        "Ld.pfm"))
        for k in range(NUMBER_OF_LEVELS):
            fileio.write_pfm(view.image(view.ls0[k]),
                             path.join(view_folder, "Ls0_{}.pfm".format(k)))
            fileio.write_pfm(view.image(view.ls1[k]),
                             path.join(view_folder, "Ls1_{}.pfm".format(k)))

        records = np.empty(len(view.triangles), dtype=_HIT_RECORD)
        records["tri"] = view.triangles
        records["pos"] = view.positions
        records["normal"] = view.normals
        with fileio.FileManager(path.join(view_folder, "hits.bin"),
                                "wb") as hit_file:
            hit_file.write(HITS_MAGIC)
            hit_file.write(struct.pack(FILE_BYTE_ORDER_CHAR + "II",
                                       view.width, view.height))
            hit_file.write(records.tobytes())

    manifest = {"levels": [float(s) for s in buffers.levels],
                "views": buffers.stats(),
                "config": config.to_dict() if config is not None else None}
    fileio.write_json(path.join(folder, "manifest.json"), manifest)


def load_shading(folder):
    """Read shading buffers written by ``save_shading``."""
    manifest = fileio.read_json(path.join(folder, "manifest.json"))
    views = []
    for i, stats in enumerate(manifest["views"]):
        view_folder = path.join(folder, "view_{}".format(i))
        with fileio.FileManager(path.join(view_folder, "hits.bin"),
                                "rb") as hit_file:
            raw = hit_file.read()
        if raw[:8] != HITS_MAGIC:
            msg = "'{}' is not a hit record file.".format(view_folder)
            raise ValueError(msg)
        width, height = struct.unpack_from(FILE_BYTE_ORDER_CHAR + "II", raw,
                                           8)
        records = np.frombuffer(raw[16:], dtype=_HIT_RECORD)
        if len(records) != width * height:
            msg = "Truncated hit records in '{}'.".format(view_folder)
            raise ValueError(msg)

        def read(name):
            return fileio.read_pfm(path.join(view_folder, name)).data

        views.append(ViewShading(
            width, height, read("Ld.pfm"),
            np.stack([read("Ls0_{}.pfm".format(k))
                      for k in range(NUMBER_OF_LEVELS)]),
            np.stack([read("Ls1_{}.pfm".format(k))
                      for k in range(NUMBER_OF_LEVELS)]),
            records["tri"], records["pos"], records["normal"], stats))
    return ShadingBuffers(views, manifest["levels"])
