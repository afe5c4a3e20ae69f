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
Ray-scene intersection, camera ray generation and surface sampling.

All functions work on batches of rays stored as numpy arrays. The BVH is
traversed breadth-first for the whole batch at once: the frontier is a
list of (ray, node) pairs that is pruned with slab tests and expanded
into (ray, triangle) pairs at the leaves.

"""
import logging

import numpy as np

logger = logging.getLogger(__name__)

LEAF_SIZE = 4
MAX_DEPTH = 64
SAH_BINS = 12
PARALLEL_EPSILON = 1e-12
BARYCENTRIC_TOLERANCE = 1e-10
RAY_CHUNK = 65536
OFFSET_SCALE = 1e-4


class Rays(object):
    """
    Batch of rays.

    Parameters
    ----------
    origins : ArrayLike[float]
        Ray origins, shape (n, 3) or (3,).
    directions : ArrayLike[float]
        Unit directions, shape (n, 3) or (3,).
    t_min : float or ArrayLike[float], optional
        Lower bound of the valid ray segment. Default: ``0``.
    t_max : float or ArrayLike[float], optional
        Upper bound of the valid ray segment. Default: ``inf``.

    """

    def __init__(self, origins, directions, t_min=0.0, t_max=np.inf):
        self.origins = np.atleast_2d(np.asarray(origins, dtype=float))
        self.directions = np.atleast_2d(np.asarray(directions, dtype=float))
        n = len(self.origins)
        self.t_min = np.broadcast_to(np.asarray(t_min, dtype=float),
                                     (n,)).copy()
        self.t_max = np.broadcast_to(np.asarray(t_max, dtype=float),
                                     (n,)).copy()

        assert self.directions.shape == self.origins.shape, \
            "Ray origins and directions differ in shape."

        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("Ray directions must have unit length.")
        if np.any(self.t_min < 0) or np.any(self.t_max <= self.t_min):
            raise ValueError("Ray segments need 0 <= t_min < t_max.")

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, key):
        return Rays(self.origins[key], self.directions[key],
                    self.t_min[key], self.t_max[key])

    def at(self, t):
        """Return the points ``origin + t * direction``."""
        return self.origins + np.asarray(t, dtype=float)[..., None] \
            * self.directions


class Hits(object):
    """
    Nearest intersections of a batch of rays.

    Attributes
    ----------
    triangles : numpy.ndarray[int]
        Hit triangle per ray, ``-1`` for a miss.
    t : numpy.ndarray[float]
        Ray distance, ``inf`` for a miss.
    positions : numpy.ndarray[float]
        Hit positions, zero for a miss.
    normals : numpy.ndarray[float]
        Unit shading normals interpolated from vertex normals.
    geometric_normals : numpy.ndarray[float]
        Unit face normals.
    barycentrics : numpy.ndarray[float]
        Barycentric coordinates of the hit, summing to one.

    """

    def __init__(self, triangles, t, positions, normals, geometric_normals,
                 barycentrics):
        self.triangles = triangles
        self.t = t
        self.positions = positions
        self.normals = normals
        self.geometric_normals = geometric_normals
        self.barycentrics = barycentrics

    def __len__(self):
        return len(self.triangles)

    @property
    def valid(self):
        """Mask of rays that hit a triangle."""
        return self.triangles >= 0

    def __getitem__(self, key):
        return Hits(self.triangles[key], self.t[key], self.positions[key],
                    self.normals[key], self.geometric_normals[key],
                    self.barycentrics[key])


class Bvh(object):
    """
    Binary bounding volume hierarchy over the triangles of a mesh.

    Nodes are stored in flat arrays. Inner nodes have ``count == 0`` and
    two children; leaves reference ``order[start:start + count]``.

    Attributes
    ----------
    bounds_min, bounds_max : numpy.ndarray[float]
        Node bounding boxes, shape (number of nodes, 3).
    left, right : numpy.ndarray[int]
        Child indices of inner nodes, ``-1`` for leaves.
    start, count : numpy.ndarray[int]
        Triangle range of leaves.
    order : numpy.ndarray[int]
        Triangle permutation referenced by the leaves.
    depth : int
        Depth of the deepest leaf (the root has depth 0).

    """

    def __init__(self, bounds_min, bounds_max, left, right, start, count,
                 order, depth):
        self.bounds_min = bounds_min
        self.bounds_max = bounds_max
        self.left = left
        self.right = right
        self.start = start
        self.count = count
        self.order = order
        self.depth = depth

        # Slightly padded boxes for traversal of flat nodes
        scale = np.abs(np.concatenate((bounds_min[:1], bounds_max[:1]))).max()
        pad = 1e-9 * max(scale, 1.0)
        self._padded_min = bounds_min - pad
        self._padded_max = bounds_max + pad

    @property
    def number_of_nodes(self):
        """Number of nodes."""
        return len(self.count)

    @property
    def leaves(self):
        """Indices of leaf nodes."""
        return np.flatnonzero(self.count > 0)

    def __repr__(self):
        return "Bvh({} nodes, {} leaves, depth {})".format(
            self.number_of_nodes, self.leaves.size, self.depth)


def _box_area(lower, upper):
    extent = np.maximum(upper - lower, 0.0)
    return 2.0 * (extent[..., 0] * extent[..., 1]
                  + extent[..., 1] * extent[..., 2]
                  + extent[..., 2] * extent[..., 0])


def _sah_split(centroids, tri_min, tri_max, bins):
    """Return a left-mask of the cheapest binned SAH split, or None."""
    lower = centroids.min(axis=0)
    extent = centroids.max(axis=0) - lower

    best_cost = np.inf
    best_mask = None
    for axis in range(3):
        if extent[axis] <= 0:
            continue
        ids = ((centroids[:, axis] - lower[axis]) / extent[axis]
               * bins).astype(np.int64)
        ids = np.clip(ids, 0, bins - 1)
        counts = np.bincount(ids, minlength=bins)

        bin_min = np.full((bins, 3), np.inf)
        bin_max = np.full((bins, 3), -np.inf)
        np.minimum.at(bin_min, ids, tri_min)
        np.maximum.at(bin_max, ids, tri_max)

        left_min = np.minimum.accumulate(bin_min, axis=0)[:-1]
        left_max = np.maximum.accumulate(bin_max, axis=0)[:-1]
        right_min = np.minimum.accumulate(bin_min[::-1], axis=0)[::-1][1:]
        right_max = np.maximum.accumulate(bin_max[::-1], axis=0)[::-1][1:]
        left_count = np.cumsum(counts)[:-1]
        right_count = len(ids) - left_count

        valid = (left_count > 0) & (right_count > 0)
        if not np.any(valid):
            continue
        with np.errstate(invalid="ignore"):
            cost = (np.where(valid, _box_area(left_min, left_max), 0.0)
                    * left_count
                    + np.where(valid, _box_area(right_min, right_max), 0.0)
                    * right_count)
        cost = np.where(valid, cost, np.inf)
        split = int(np.argmin(cost))
        if cost[split] < best_cost:
            best_cost = cost[split]
            best_mask = ids <= split

    return best_mask


def build_bvh(mesh, leaf_size=LEAF_SIZE, max_depth=MAX_DEPTH,
              bins=SAH_BINS):
    """
    Build a BVH with the binned surface-area heuristic.

    Nodes whose triangles cannot be separated by the heuristic (e.g. all
    centroids coincide along every axis) are split at the median.

    Parameters
    ----------
    mesh : TriangleMesh
        The mesh to build the hierarchy for.
    leaf_size : int, optional
        Maximum number of triangles per leaf. Default: ``4``.
    max_depth : int, optional
        Maximum tree depth. Default: ``64``.
    bins : int, optional
        Number of SAH bins per axis. Default: ``12``.

    Returns
    -------
    Bvh
        The hierarchy.

    """
    number_of_triangles = len(mesh.triangles)
    if number_of_triangles == 0:
        raise ValueError("Cannot build a BVH for an empty mesh.")

    corners = mesh.corners
    tri_min = corners.min(axis=1)
    tri_max = corners.max(axis=1)
    centroids = corners.mean(axis=1)

    order = np.arange(number_of_triangles)
    bounds_min, bounds_max = [], []
    left, right, start, count = [], [], [], []

    def new_node():
        for array in (left, right, start, count):
            array.append(-1 if array is not count else 0)
        bounds_min.append(None)
        bounds_max.append(None)
        return len(count) - 1

    deepest = 0
    stack = [(new_node(), 0, number_of_triangles, 0)]
    while stack:
        node, begin, end, depth = stack.pop()
        ids = order[begin:end]
        bounds_min[node] = tri_min[ids].min(axis=0)
        bounds_max[node] = tri_max[ids].max(axis=0)
        deepest = max(deepest, depth)

        size = end - begin
        if size <= leaf_size or depth >= max_depth:
            start[node] = begin
            count[node] = size
            continue

        mask = _sah_split(centroids[ids], tri_min[ids], tri_max[ids], bins)
        if mask is None:
            # Median split along the widest centroid axis
            spread = np.ptp(centroids[ids], axis=0)
            axis = int(np.argmax(spread))
            ranks = np.argsort(centroids[ids, axis], kind="stable")
            mask = np.zeros(size, dtype=bool)
            mask[ranks[:size // 2]] = True

        number_left = int(np.count_nonzero(mask))
        order[begin:end] = np.concatenate((ids[mask], ids[~mask]))

        left_node = new_node()
        right_node = new_node()
        left[node] = left_node
        right[node] = right_node
        stack.append((right_node, begin + number_left, end, depth + 1))
        stack.append((left_node, begin, begin + number_left, depth + 1))

    bvh = Bvh(np.array(bounds_min), np.array(bounds_max),
              np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
              np.array(start, dtype=np.int64),
              np.array(count, dtype=np.int64), order, deepest)
    logger.debug("built %r for %d triangles", bvh, number_of_triangles)
    return bvh


def _dot(a, b):
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1] + a[:, 2] * b[:, 2]


def _cross(a, b):
    return np.stack((a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1],
                     a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2],
                     a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]), axis=1)


def intersect_triangles(origins, directions, corners):
    """
    Two-sided Moeller-Trumbore test of paired rays and triangles.

    Parameters
    ----------
    origins, directions : numpy.ndarray[float]
        Rays, shape (n, 3).
    corners : numpy.ndarray[float]
        Triangle corners, shape (n, 3, 3).

    Returns
    -------
    t : numpy.ndarray[float]
        Ray distance, ``inf`` where there is no intersection.
    u, v : numpy.ndarray[float]
        Barycentric coordinates of the second and third corner.

    """
    edge1 = corners[:, 1] - corners[:, 0]
    edge2 = corners[:, 2] - corners[:, 0]
    p = _cross(directions, edge2)
    det = _dot(edge1, p)
    parallel = np.abs(det) < PARALLEL_EPSILON
    inv_det = 1.0 / np.where(parallel, 1.0, det)

    s = origins - corners[:, 0]
    u = _dot(s, p) * inv_det
    q = _cross(s, edge1)
    v = _dot(directions, q) * inv_det
    t = _dot(edge2, q) * inv_det

    inside = (~parallel & (u >= -BARYCENTRIC_TOLERANCE)
              & (v >= -BARYCENTRIC_TOLERANCE)
              & (u + v <= 1.0 + BARYCENTRIC_TOLERANCE))
    return np.where(inside, t, np.inf), u, v


def _update_nearest(ray_ids, tri_ids, t, t_best, tri_best):
    """Keep the nearest candidate per ray, ties go to the smaller index."""
    if ray_ids.size == 0:
        return
    order = np.lexsort((tri_ids, t, ray_ids))
    ray_ids, tri_ids, t = ray_ids[order], tri_ids[order], t[order]
    first = np.unique(ray_ids, return_index=True)[1]
    ray_ids, tri_ids, t = ray_ids[first], tri_ids[first], t[first]

    current_t = t_best[ray_ids]
    current_tri = tri_best[ray_ids]
    better = (t < current_t) | ((t == current_t)
                                & ((current_tri < 0)
                                   | (tri_ids < current_tri)))
    t_best[ray_ids[better]] = t[better]
    tri_best[ray_ids[better]] = tri_ids[better]


def _finish_hits(mesh, rays, tri_best, t_best):
    """Recompute barycentrics and normals for the final triangles."""
    n = len(rays)
    hit = tri_best >= 0
    positions = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    geometric = np.zeros((n, 3))
    barycentrics = np.zeros((n, 3))

    if np.any(hit):
        ids = tri_best[hit]
        t, u, v = intersect_triangles(rays.origins[hit],
                                      rays.directions[hit],
                                      mesh.corners[ids])
        bary = np.clip(np.stack((1.0 - u - v, u, v), axis=1), 0.0, None)
        bary /= bary.sum(axis=1, keepdims=True)
        barycentrics[hit] = bary
        positions[hit] = rays.origins[hit] + t_best[hit, None] \
            * rays.directions[hit]
        normals[hit] = mesh.shading_normals(ids, bary)
        geometric[hit] = mesh.face_normals[ids]

    t_out = np.where(hit, t_best, np.inf)
    return Hits(tri_best, t_out, positions, normals, geometric, barycentrics)


def intersect(bvh, mesh, rays):
    """
    Find the nearest intersection of every ray in ``(t_min, t_max)``.

    Triangles are two-sided. Among hits at exactly the same distance the
    triangle with the smallest index is reported, so the result is
    identical to ``intersect_brute_force``.

    Parameters
    ----------
    bvh : Bvh
        Hierarchy built for ``mesh``.
    mesh : TriangleMesh
        The scene geometry.
    rays : Rays
        The query rays.

    Returns
    -------
    Hits
        The nearest hits; misses have triangle ``-1``.

    """
    n = len(rays)
    t_best = rays.t_max.copy()
    tri_best = np.full(n, -1, dtype=np.int64)

    for chunk_start in range(0, n, RAY_CHUNK):
        chunk = np.arange(chunk_start, min(n, chunk_start + RAY_CHUNK))
        _traverse(bvh, mesh, rays, chunk, t_best, tri_best)

    return _finish_hits(mesh, rays, tri_best, t_best)


def _traverse(bvh, mesh, rays, ray_ids, t_best, tri_best):
    origins = rays.origins
    with np.errstate(divide="ignore"):
        inv_dir = 1.0 / rays.directions

    node_ids = np.zeros(len(ray_ids), dtype=np.int64)
    while ray_ids.size:
        # Slab test against the node boxes
        o = origins[ray_ids]
        inv = inv_dir[ray_ids]
        with np.errstate(invalid="ignore"):
            t0 = (bvh._padded_min[node_ids] - o) * inv
            t1 = (bvh._padded_max[node_ids] - o) * inv
        t_near = np.fmax.reduce(np.fmin(t0, t1), axis=1)
        t_far = np.fmin.reduce(np.fmax(t0, t1), axis=1)
        keep = ((t_near <= t_far) & (t_far >= rays.t_min[ray_ids])
                & (t_near <= t_best[ray_ids]))
        ray_ids = ray_ids[keep]
        node_ids = node_ids[keep]

        counts = bvh.count[node_ids]
        leaf = counts > 0

        if np.any(leaf):
            leaf_rays = ray_ids[leaf]
            leaf_counts = counts[leaf]
            pair_rays = np.repeat(leaf_rays, leaf_counts)
            offsets = np.arange(pair_rays.size) \
                - np.repeat(np.cumsum(leaf_counts) - leaf_counts,
                            leaf_counts)
            pair_tris = bvh.order[np.repeat(bvh.start[node_ids[leaf]],
                                            leaf_counts) + offsets]

            t, _, _ = intersect_triangles(origins[pair_rays],
                                          rays.directions[pair_rays],
                                          mesh.corners[pair_tris])
            valid = ((t > rays.t_min[pair_rays])
                     & (t < rays.t_max[pair_rays])
                     & (t <= t_best[pair_rays]))
            _update_nearest(pair_rays[valid], pair_tris[valid], t[valid],
                            t_best, tri_best)

        inner_rays = ray_ids[~leaf]
        inner_nodes = node_ids[~leaf]
        ray_ids = np.concatenate((inner_rays, inner_rays))
        node_ids = np.concatenate((bvh.left[inner_nodes],
                                   bvh.right[inner_nodes]))


def intersect_brute_force(mesh, rays, pairs_per_batch=1 << 20):
    """
    Reference intersection testing every ray against every triangle.

    Parameters
    ----------
    mesh : TriangleMesh
        The scene geometry.
    rays : Rays
        The query rays.
    pairs_per_batch : int, optional
        Approximate number of (ray, triangle) pairs tested at once.

    Returns
    -------
    Hits
        The nearest hits, identical to ``intersect``.

    """
    n = len(rays)
    number_of_triangles = len(mesh.triangles)
    t_best = rays.t_max.copy()
    tri_best = np.full(n, -1, dtype=np.int64)
    rows = max(1, pairs_per_batch // max(1, number_of_triangles))

    for begin in range(0, n, rows):
        ray_ids = np.repeat(np.arange(begin, min(n, begin + rows)),
                            number_of_triangles)
        tri_ids = np.tile(np.arange(number_of_triangles),
                          min(n, begin + rows) - begin)
        t, _, _ = intersect_triangles(rays.origins[ray_ids],
                                      rays.directions[ray_ids],
                                      mesh.corners[tri_ids])
        valid = (t > rays.t_min[ray_ids]) & (t < rays.t_max[ray_ids])
        _update_nearest(ray_ids[valid], tri_ids[valid], t[valid], t_best,
                        tri_best)

    return _finish_hits(mesh, rays, tri_best, t_best)


def primary_ray(camera, px, py, jitter=(0.5, 0.5)):
    """
    Generate pinhole rays through pixel positions.

    Parameters
    ----------
    camera : Camera
        The camera.
    px, py : int or ArrayLike[int]
        Pixel column and row.
    jitter : ArrayLike[float], optional
        Sub-pixel offset in [0, 1)^2, either one pair or one per pixel.
        Default: ``(0.5, 0.5)``, the pixel center.

    Returns
    -------
    Rays
        One ray per pixel.

    """
    px = np.atleast_1d(np.asarray(px))
    py = np.atleast_1d(np.asarray(py))
    if np.any((px < 0) | (px >= camera.width) | (py < 0)
              | (py >= camera.height)):
        msg = "Pixel out of bounds for a {}x{} camera.".format(
            camera.width, camera.height)
        raise IndexError(msg)

    jitter = np.asarray(jitter, dtype=float).reshape(-1, 2)
    x = px + jitter[:, 0]
    y = py + jitter[:, 1]
    local = np.stack(((x - camera.cx) / camera.fx,
                      (y - camera.cy) / camera.fy,
                      np.ones(np.broadcast(x, y).shape)), axis=1)
    directions = local @ camera.rotation.T
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, directions.shape)
    return Rays(origins, directions)


def camera_rays(camera, jitter=(0.5, 0.5)):
    """Rays through all pixels of a camera in row-major order."""
    py, px = np.divmod(np.arange(camera.width * camera.height),
                       camera.width)
    return primary_ray(camera, px, py, jitter)


def render_triangle_ids(bvh, mesh, camera):
    """Return the triangle seen through each pixel center, -1 if none."""
    hits = intersect(bvh, mesh, camera_rays(camera))
    return hits.triangles.reshape(camera.height, camera.width)


def sample_triangle(corners, u):
    """
    Uniformly sample points on triangles.

    Parameters
    ----------
    corners : ArrayLike[float]
        Triangle corners, shape (3, 3) or (n, 3, 3).
    u : ArrayLike[float]
        Uniform numbers in [0, 1)^2, shape (2,) or (n, 2).

    Returns
    -------
    numpy.ndarray[float]
        Sampled positions, ``u = (0, 0)`` maps to the first corner.

    """
    corners = np.asarray(corners, dtype=float)
    u = np.asarray(u, dtype=float)
    single = corners.ndim == 2 and u.ndim == 1
    corners = corners.reshape(-1, 3, 3)
    u = u.reshape(-1, 2)

    bary = sample_barycentrics(u)
    positions = np.einsum("nk,nkd->nd", bary, corners)
    return positions[0] if single else positions


def sample_barycentrics(u):
    """Square-root warp from [0, 1)^2 to uniform barycentrics."""
    su = np.sqrt(u[:, 0])
    b0 = 1.0 - su
    b1 = u[:, 1] * su
    return np.stack((b0, b1, 1.0 - b0 - b1), axis=1)


def offset_origin(positions, geometric_normals, directions, epsilon):
    """
    Push ray origins off a surface to avoid self-intersection.

    The origin is moved by ``epsilon`` along the geometric normal, on the
    side the new direction points to.

    """
    side = np.sign(np.sum(geometric_normals * directions, axis=-1))
    side = np.where(side == 0, 1.0, side)
    return positions + (epsilon * side)[..., None] * geometric_normals


def offset_epsilon(scene_diagonal):
    """Ray offset distance for a scene of the given diagonal."""
    return OFFSET_SCALE * scene_diagonal


def orthonormal_basis(normals):
    """
    Build tangent frames around unit normals (branchless construction
    of Duff et al.).

    Returns
    -------
    tangents, bitangents : numpy.ndarray[float]
        Unit vectors completing a right-handed frame with the normals.

    """
    normals = np.atleast_2d(normals)
    x, y, z = normals[:, 0], normals[:, 1], normals[:, 2]
    sign = np.where(z >= 0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    tangents = np.stack((1.0 + sign * x * x * a, sign * b, -sign * x),
                        axis=1)
    bitangents = np.stack((b, sign + y * y * a, -y), axis=1)
    return tangents, bitangents


def to_world(local, normals):
    """Rotate local directions (z along the normal) into world space."""
    tangents, bitangents = orthonormal_basis(normals)
    return (local[:, 0:1] * tangents + local[:, 1:2] * bitangents
            + local[:, 2:3] * normals)


def to_local(directions, normals):
    """Express world directions in the frame of the normals."""
    tangents, bitangents = orthonormal_basis(normals)
    return np.stack((np.sum(directions * tangents, axis=1),
                     np.sum(directions * bitangents, axis=1),
                     np.sum(directions * normals, axis=1)), axis=1)
