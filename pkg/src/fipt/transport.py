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
Light transport shared by shading refinement and the forward renderer.

Paths are grown with BRDF importance sampling and next-event estimation
on the emitter triangles, combined with the power heuristic. A path ends
when it hits an emitter, leaves the scene, exceeds the depth limit or,
when a radiance cache is given, reaches a rough surface whose outgoing
radiance is read from the cache.

"""
import numpy as np

from fipt import brdf
from fipt.constants import DIFFUSE_THRESHOLD
from fipt.geometry import Rays, intersect, offset_origin

MIN_SURVIVAL = 0.05


class TransportContext(object):
    """
    Everything needed to grow paths through a scene.

    Parameters
    ----------
    mesh : TriangleMesh
        The scene geometry.
    bvh : Bvh
        Hierarchy of ``mesh``.
    materials : object
        Material source with a method ``brdf(positions, triangles)``
        returning ``BrdfParams``.
    emitters : EmitterSet
        Light sources. Emitters reflect no light.
    epsilon : float
        Ray origin offset along geometric normals.
    cache : RadianceCache, optional
        If given, paths end at surfaces rougher than
        ``diffuse_threshold`` and at the depth limit with the cached
        radiance.
    diffuse_threshold : float, optional
        Roughness above which cached radiance is used. Default: ``0.6``.
    max_depth : int, optional
        Maximum number of traced segments. Default: ``8``.
    rr_start_depth : int, optional
        First depth at which Russian roulette is applied. Default: ``3``.
    throughput_clamp : float, optional
        Upper bound of each throughput component. Default: ``None``.
    mis : bool, optional
        If ``False``, no next-event estimation is done and emitters are
        only found by BRDF sampling. Default: ``True``.

    """

    def __init__(self, mesh, bvh, materials, emitters, epsilon, cache=None,
                 diffuse_threshold=DIFFUSE_THRESHOLD, max_depth=8,
                 rr_start_depth=3, throughput_clamp=None, mis=True):
        self.mesh = mesh
        self.bvh = bvh
        self.materials = materials
        self.emitters = emitters
        self.epsilon = epsilon
        self.cache = cache
        self.diffuse_threshold = diffuse_threshold
        self.max_depth = max_depth
        self.rr_start_depth = rr_start_depth
        self.throughput_clamp = throughput_clamp
        self.mis = mis and emitters is not None \
            and emitters.can_sample(mesh)


def new_stats():
    """Counters collected while growing paths."""
    return {"escapes": 0, "cache_queries": 0, "cache_misses": 0}


def merge_stats(target, source):
    """Add counters of ``source`` into ``target``."""
    for key, value in source.items():
        target[key] = target.get(key, 0) + value
    return target


def power_heuristic(pdf_a, pdf_b):
    """MIS weight of strategy ``a`` with exponent 2."""
    a2 = np.square(pdf_a)
    total = a2 + np.square(pdf_b)
    return np.where(total > 0, a2 / np.where(total > 0, total, 1.0), 0.0)


def sample_lights(ctx, positions, geometric_normals, bsdf_pdf, rng):
    """
    Next-event estimation towards the emitter triangles.

    Parameters
    ----------
    ctx : TransportContext
        The scene.
    positions, geometric_normals : numpy.ndarray[float]
        Shading points, shape (n, 3).
    bsdf_pdf : callable
        Maps sampled directions (n, 3) to the density with which the
        BRDF sampling strategy would have produced them.
    rng : numpy.random.Generator
        Random number source.

    Returns
    -------
    wi : numpy.ndarray[float]
        Directions to the sampled light points.
    weight : numpy.ndarray[float]
        Emitted radiance times MIS weight over light density, zero for
        occluded samples. Multiply by the cosine-weighted BRDF at ``wi``
        to get the estimate.

    """
    count = len(positions)
    u = rng.random((count, 3))
    targets, triangles, pdf_area = ctx.emitters.sample_points(ctx.mesh, u)

    delta = targets - positions
    distance = np.linalg.norm(delta, axis=1)
    valid = distance > 0
    wi = delta / np.where(valid, distance, 1.0)[:, None]
    cos_light = np.abs(np.sum(ctx.mesh.face_normals[triangles] * wi,
                              axis=1))
    valid &= cos_light > 1e-8
    pdf_light = pdf_area * np.square(distance) \
        / np.where(valid, cos_light, 1.0)

    weight = np.zeros((count, 3))
    if not np.any(valid):
        return wi, weight

    ids = np.flatnonzero(valid)
    origins = offset_origin(positions[ids], geometric_normals[ids], wi[ids],
                            ctx.epsilon)
    reach = np.linalg.norm(targets[ids] - origins, axis=1)
    hits = intersect(ctx.bvh, ctx.mesh,
                     Rays(origins, wi[ids], 0.0, reach + ctx.epsilon))
    visible = (~hits.valid) | (hits.triangles == triangles[ids])
    ids = ids[visible]

    mis = power_heuristic(pdf_light[ids], bsdf_pdf(wi)[ids])
    weight[ids] = ctx.emitters.emission(triangles[ids]) \
        * (mis / pdf_light[ids])[:, None]
    return wi, weight


def _light_pdf(ctx, hits, directions):
    """Solid-angle density of ``sample_lights`` for BRDF-sampled hits."""
    cos_light = np.abs(np.sum(ctx.mesh.face_normals[hits.triangles]
                              * directions, axis=1))
    pdf_area = ctx.emitters.pdf_area(ctx.mesh, hits.triangles)
    return pdf_area * np.square(hits.t) / np.maximum(cos_light, 1e-12)


def incident_radiance(ctx, positions, geometric_normals, wi, pdf_wi, rng,
                      stats, nee_at_origin=True, max_depth=None):
    """
    Radiance arriving at shading points from sampled directions.

    Parameters
    ----------
    ctx : TransportContext
        The scene.
    positions, geometric_normals : numpy.ndarray[float]
        Shading points, shape (n, 3).
    wi : numpy.ndarray[float]
        Sampled incident directions.
    pdf_wi : numpy.ndarray[float]
        Density of the sampled directions, used for MIS at emitter hits.
    rng : numpy.random.Generator
        Random number source.
    stats : dict
        Counters updated in place, see ``new_stats``.
    nee_at_origin : bool, optional
        Whether next-event estimation was done at the shading points.
        Default: ``True``.
    max_depth : int, optional
        Overrides the depth limit of the context.

    Returns
    -------
    numpy.ndarray[float]
        RGB radiance, shape (n, 3).

    """
    max_depth = ctx.max_depth if max_depth is None else max_depth
    count = len(positions)
    result = np.zeros((count, 3))
    if count == 0 or max_depth < 1:
        return result

    active = np.arange(count)
    throughput = np.ones((count, 3))
    directions = np.asarray(wi, dtype=float)
    origins = offset_origin(positions, geometric_normals, directions,
                            ctx.epsilon)
    previous_pdf = np.asarray(pdf_wi, dtype=float)
    previous_nee = ctx.mis and nee_at_origin

    for depth in range(1, max_depth + 1):
        if active.size == 0:
            break
        hits = intersect(ctx.bvh, ctx.mesh, Rays(origins, directions))

        # Escaped rays
        miss = ~hits.valid
        if np.any(miss):
            stats["escapes"] += int(np.count_nonzero(miss))
            if ctx.emitters is not None:
                result[active[miss]] += throughput[miss] \
                    * ctx.emitters.escape_radiance(directions[miss])

        keep = ~miss
        hits, active = hits[keep], active[keep]
        throughput, directions = throughput[keep], directions[keep]
        previous_pdf = previous_pdf[keep]

        # Emitters contribute their radiance and reflect nothing
        if ctx.emitters is not None and len(ctx.emitters):
            emissive = ctx.emitters.is_emitter(hits.triangles)
            if np.any(emissive):
                emitted = ctx.emitters.emission(hits.triangles[emissive])
                if previous_nee:
                    mis = power_heuristic(
                        previous_pdf[emissive],
                        _light_pdf(ctx, hits[emissive],
                                   directions[emissive]))
                    emitted = emitted * mis[:, None]
                result[active[emissive]] += throughput[emissive] * emitted

            keep = ~emissive
            hits, active = hits[keep], active[keep]
            throughput, directions = throughput[keep], directions[keep]

        if active.size == 0:
            break

        params = ctx.materials.brdf(hits.positions, hits.triangles)

        if ctx.cache is not None:
            cached = params.sigma > ctx.diffuse_threshold
            if depth == max_depth:
                cached[:] = True
            if np.any(cached):
                values, found = ctx.cache.query(hits.positions[cached])
                stats["cache_queries"] += int(np.count_nonzero(cached))
                stats["cache_misses"] += int(np.count_nonzero(~found))
                result[active[cached]] += throughput[cached] * values

            keep = ~cached
            hits, active = hits[keep], active[keep]
            throughput, directions = throughput[keep], directions[keep]
            params = params[keep]
        elif depth == max_depth:
            break

        if active.size == 0:
            break

        wo = -directions
        normals = brdf.face_forward(hits.normals, wo)

        if ctx.mis:
            def bsdf_pdf(light_wi, params=params, wo=wo, normals=normals):
                return brdf.pdf(params, light_wi, wo, normals)

            light_wi, light_weight = sample_lights(
                ctx, hits.positions, hits.geometric_normals, bsdf_pdf, rng)
            result[active] += throughput * light_weight \
                * brdf.eval(params, light_wi, wo, normals)

        lobe = brdf.sample(params, wo, normals, rng.random((len(wo), 3)))
        value = brdf.eval(params, lobe.wi, wo, normals)
        alive = (lobe.pdf > 0) & np.any(value > 0, axis=1)
        throughput = throughput * value \
            / np.where(alive, lobe.pdf, 1.0)[:, None]
        if ctx.throughput_clamp is not None:
            throughput = np.minimum(throughput, ctx.throughput_clamp)

        if depth >= ctx.rr_start_depth:
            survival = np.clip(throughput.max(axis=1), MIN_SURVIVAL, 1.0)
            alive &= rng.random(len(survival)) < survival
            throughput = throughput / survival[:, None]

        origins = offset_origin(hits.positions[alive],
                                hits.geometric_normals[alive],
                                lobe.wi[alive], ctx.epsilon)
        directions = lobe.wi[alive]
        throughput = throughput[alive]
        previous_pdf = lobe.pdf[alive]
        active = active[alive]
        previous_nee = ctx.mis

    return result
