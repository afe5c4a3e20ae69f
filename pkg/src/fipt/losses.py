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
Loss terms of the material and emission mask optimization.

Every term exists twice. The value-level functions (``masked_render``,
``emission_l1``, ``diffuse_prior``, ``part_propagation``,
``semantic_propagation``) take plain arrays and return the loss with its
gradients with respect to those arrays. The ``loss_*`` functions
evaluate the fields on a ``TrainingPixels`` batch, chain the value-level
gradients through the fields and return parameter gradients.

"""
import logging

import numpy as np

from fipt import brdf
from fipt.constants import PART, SEMANTIC, as_constant
from fipt.fileio import tonemap, tonemap_derivative
from fipt.shading import factorized_render, lerp_specular

logger = logging.getLogger(__name__)

# Rows per block of the pairwise semantic kernel
KERNEL_CHUNK = 1024


class TrainingPixels(object):
    """
    Flat arrays of all training pixels.

    The shading buffers are laid out like those of a ``ViewShading``,
    so ``factorized_render`` can be applied to pixel indices directly.

    Attributes
    ----------
    views, pixels : numpy.ndarray[int]
        View and flat pixel index per sample.
    triangles : numpy.ndarray[int]
        Primary-hit triangle per sample.
    positions : numpy.ndarray[float]
        World-space hit positions, shape (n, 3).
    x : numpy.ndarray[float]
        Hit positions normalized to the unit cube, shape (n, 3).
    radiance : numpy.ndarray[float]
        Observed radiance, shape (n, 3).
    ld : numpy.ndarray[float]
        Diffuse shading, shape (n, 3).
    ls0, ls1 : numpy.ndarray[float]
        Specular shadings, shape (6, n, 3).
    groups : numpy.ndarray[int]
        Segment ID per sample for the propagation loss.

    """

    def __init__(self, views, pixels, triangles, positions, x, radiance, ld,
                 ls0, ls1, groups):
        self.views = np.asarray(views, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=np.int64)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.positions = np.asarray(positions, dtype=float)
        self.x = np.asarray(x, dtype=float)
        self.radiance = np.asarray(radiance, dtype=float)
        self.ld = np.asarray(ld, dtype=float)
        self.ls0 = np.asarray(ls0, dtype=float)
        self.ls1 = np.asarray(ls1, dtype=float)
        self.groups = np.asarray(groups, dtype=np.int64)

    def __len__(self):
        return len(self.pixels)

    def subset(self, indices):
        """Return the samples at ``indices`` as a new batch."""
        return TrainingPixels(
            self.views[indices], self.pixels[indices],
            self.triangles[indices], self.positions[indices],
            self.x[indices], self.radiance[indices], self.ld[indices],
            self.ls0[:, indices], self.ls1[:, indices],
            self.groups[indices])


# --------------------------------------------------------------------------
# value-level terms
# --------------------------------------------------------------------------

def masked_render(rendered, observed, alpha):
    """
    Tone-mapped L2 loss with the emission mask.

    ``mean_n sum_c (T((1 - alpha) L_r + alpha L) - T(L))^2`` where ``T``
    is the loss tone mapping. Where ``alpha = 1`` the residual vanishes.

    Returns
    -------
    loss : float
    d_rendered : numpy.ndarray[float]
        Shape (n, 3).
    d_alpha : numpy.ndarray[float]
        Shape (n,).

    """
    rendered = np.asarray(rendered, dtype=float)
    observed = np.asarray(observed, dtype=float)
    alpha = np.asarray(alpha, dtype=float)[:, None]
    n = max(len(rendered), 1)

    blended = (1.0 - alpha) * rendered + alpha * observed
    residual = tonemap(blended) - tonemap(observed)
    loss = float(np.sum(np.square(residual)) / n)

    d_blended = 2.0 * residual * tonemap_derivative(blended) / n
    d_rendered = d_blended * (1.0 - alpha)
    d_alpha = np.sum(d_blended * (observed - rendered), axis=1)
    return loss, d_rendered, d_alpha


def emission_l1(e, weight=1.0):
    """``weight * mean |e|`` and its subgradient (zero at ``e = 0``)."""
    e = np.asarray(e, dtype=float)
    n = max(len(e), 1)
    return float(weight * np.sum(np.abs(e)) / n), weight * np.sign(e) / n


def diffuse_prior(m, sigma, weight=5e-4):
    """
    Prior favouring rough dielectrics.

    Returns
    -------
    loss : float
        ``weight * mean(|1 - sigma| + |m|)``.
    d_m, d_sigma : numpy.ndarray[float]

    """
    m = np.asarray(m, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = max(len(m), 1)
    loss = weight * np.sum(np.abs(1.0 - sigma) + np.abs(m)) / n
    return float(loss), weight * np.sign(m) / n, \
        -weight * np.sign(1.0 - sigma) / n


def semantic_kernel(a, x, a_other, x_other, sigma_a=1.6e-2, sigma_x=1e-2):
    """
    Pairwise weights from albedo and position similarity.

    Parameters
    ----------
    a, x : numpy.ndarray[float]
        Albedo and normalized position of the receiving samples, (n, 3).
    a_other, x_other : numpy.ndarray[float]
        Albedo and normalized position of the contributing samples,
        (k, 3).

    Returns
    -------
    numpy.ndarray[float]
        Weights of shape (n, k), 1 for identical samples.

    """
    def squared_distances(p, q):
        p = np.atleast_2d(p)
        q = np.atleast_2d(q)
        return np.maximum(np.sum(p * p, axis=1)[:, None]
                          + np.sum(q * q, axis=1)[None]
                          - 2.0 * p @ q.T, 0.0)

    return np.exp(-squared_distances(a, a_other) / (2.0 * sigma_a ** 2)) \
        * np.exp(-squared_distances(x, x_other) / (2.0 * sigma_x ** 2))


def _propagation_l1(m, sigma, target_m, target_sigma, has_target, weight):
    n = max(len(m), 1)
    diff_m = np.where(has_target, m - target_m, 0.0)
    diff_sigma = np.where(has_target, sigma - target_sigma, 0.0)
    loss = weight * np.sum(np.abs(diff_m) + np.abs(diff_sigma)) / n
    return float(loss), weight * np.sign(diff_m) / n, \
        weight * np.sign(diff_sigma) / n


def part_propagation(groups, m, sigma, highlight, weight=5e-3):
    """
    Pull roughness and metallic toward highlight-weighted group means.

    Within every group the target ``(sigma', m')`` is the mean of the
    group's values weighted by ``highlight``. Targets and weights are
    constants, a group without any highlight is skipped.

    Returns
    -------
    loss : float
    d_m, d_sigma : numpy.ndarray[float]

    """
    groups = np.asarray(groups)
    m = np.asarray(m, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    highlight = np.asarray(highlight, dtype=float)

    labels, inverse = np.unique(groups, return_inverse=True)
    inverse = inverse.ravel()
    total = np.bincount(inverse, weights=highlight, minlength=len(labels))
    weighted_m = np.bincount(inverse, weights=highlight * m,
                             minlength=len(labels))
    weighted_sigma = np.bincount(inverse, weights=highlight * sigma,
                                 minlength=len(labels))
    has_weight = total > 0
    safe = np.where(has_weight, total, 1.0)

    return _propagation_l1(m, sigma, (weighted_m / safe)[inverse],
                           (weighted_sigma / safe)[inverse],
                           has_weight[inverse], weight)


def semantic_propagation(groups, m, sigma, a, x, weight=1e-3,
                         sigma_a=1.6e-2, sigma_x=1e-2):
    """
    Pull roughness and metallic toward kernel-weighted means.

    Within every group, the target of each sample is the mean over the
    group weighted by ``semantic_kernel``. Targets and weights are
    constants.

    Returns
    -------
    loss : float
    d_m, d_sigma : numpy.ndarray[float]

    """
    groups = np.asarray(groups)
    m = np.asarray(m, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)

    target_m = np.zeros_like(m)
    target_sigma = np.zeros_like(sigma)
    has_target = np.zeros(len(m), dtype=bool)
    for label in np.unique(groups):
        members = np.flatnonzero(groups == label)
        for start in range(0, len(members), KERNEL_CHUNK):
            rows = members[start:start + KERNEL_CHUNK]
            w = semantic_kernel(a[rows], x[rows], a[members], x[members],
                                sigma_a, sigma_x)
            total = w.sum(axis=1)
            ok = total > 0
            safe = np.where(ok, total, 1.0)
            target_m[rows] = (w @ m[members]) / safe
            target_sigma[rows] = (w @ sigma[members]) / safe
            has_target[rows] = ok
    return _propagation_l1(m, sigma, target_m, target_sigma, has_target,
                           weight)


def highlight_magnitude(batch, indices, a, m, sigma):
    """L1 norm of the specular radiance ``k_s L_s0 + L_s1`` per sample."""
    ls0, ls1 = lerp_specular(batch, indices, sigma)
    _, k_s = brdf.coeffs(np.asarray(a, dtype=float),
                         np.asarray(m, dtype=float))
    return np.sum(np.abs(k_s * ls0 + ls1), axis=1)


# --------------------------------------------------------------------------
# field-level terms
# --------------------------------------------------------------------------

def _brdf_gradients(field, cache, d_a=None, d_m=None, d_sigma=None):
    n = len(cache[1])
    d_outputs = np.zeros((n, 5))
    if d_a is not None:
        d_outputs[:, :3] = d_a
    if d_m is not None:
        d_outputs[:, 3] = d_m
    if d_sigma is not None:
        d_outputs[:, 4] = d_sigma
    return field.backward(cache, d_outputs)


def loss_masked_render(batch, brdf_field, mask_field):
    """
    Masked render loss of a batch.

    Returns
    -------
    loss : float
    gradients : dict
        Parameter gradients of both fields.

    """
    outputs, brdf_cache = brdf_field.forward(batch.x)
    alpha, _, mask_cache = mask_field.forward(batch.x)
    indices = np.arange(len(batch))
    rendered, (d_a, d_m, d_sigma) = factorized_render(
        batch, indices, outputs[:, :3], outputs[:, 3], outputs[:, 4],
        gradients=True)
    loss, d_rendered, d_alpha = masked_render(rendered, batch.radiance,
                                              alpha)
    gradients = _brdf_gradients(brdf_field, brdf_cache, d_rendered * d_a,
                                np.sum(d_rendered * d_m, axis=1),
                                np.sum(d_rendered * d_sigma, axis=1))
    gradients.update(mask_field.backward(mask_cache, d_alpha))
    return loss, gradients


def loss_emission_reg(mask_field, batch, weight=1.0):
    """L1 penalty on the mask pre-activation at the batch positions."""
    alpha, e, cache = mask_field.forward(batch.x)
    loss, d_e = emission_l1(e, weight)
    return loss, mask_field.backward(cache, np.zeros_like(alpha), d_e)


def loss_diffuse_prior(brdf_field, batch, weight=5e-4):
    """Diffuse prior on the material field at the batch positions."""
    outputs, cache = brdf_field.forward(batch.x)
    loss, d_m, d_sigma = diffuse_prior(outputs[:, 3], outputs[:, 4], weight)
    return loss, _brdf_gradients(brdf_field, cache, d_m=d_m,
                                 d_sigma=d_sigma)


def loss_part_propagation(brdf_field, batch, grouping=PART, weight=None,
                          sigma_a=1.6e-2, sigma_x=1e-2):
    """
    Propagation loss in part or semantic mode.

    Parameters
    ----------
    brdf_field : BrdfField
        The material field.
    batch : TrainingPixels
        Samples with group IDs.
    grouping : str or FiptConstant, optional
        ``PART`` weights by highlight magnitude, ``SEMANTIC`` by the
        albedo and position kernel. Default: ``PART``.
    weight : float, optional
        Loss weight. Default: 5e-3 in part mode, 1e-3 in semantic mode.

    """
    grouping = as_constant(grouping, PART, SEMANTIC)
    if weight is None:
        weight = 5e-3 if grouping == PART else 1e-3
    outputs, cache = brdf_field.forward(batch.x)
    a = outputs[:, :3].astype(float)
    m = outputs[:, 3].astype(float)
    sigma = outputs[:, 4].astype(float)

    if grouping == PART:
        highlight = highlight_magnitude(batch, np.arange(len(batch)), a,
                                        m, sigma)
        loss, d_m, d_sigma = part_propagation(batch.groups, m, sigma,
                                              highlight, weight)
    else:
        loss, d_m, d_sigma = semantic_propagation(
            batch.groups, m, sigma, a, batch.x, weight, sigma_a, sigma_x)
    return loss, _brdf_gradients(brdf_field, cache, d_m=d_m,
                                 d_sigma=d_sigma)
