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
Microfacet reflectance model with base color, metallic and roughness.

The model is a Lambertian diffuse lobe plus a GGX specular lobe with
separable Smith shadowing (Schlick-GGX, ``k = alpha / 2``) and Schlick
Fresnel, using ``alpha = sigma ** 2``. Schlick Fresnel is split into a
part that scales with the specular coefficient and a part that does not,
which allows pre-integrating the specular lobe independent of the
material color.

All functions are vectorized over a leading batch dimension. Directions
point away from the surface.

"""
import numpy as np

from fipt.constants import (DIELECTRIC_F0, LUMINANCE_WEIGHTS, SIGMA_MIN)
from fipt.geometry import to_local, to_world

MIN_DIFFUSE_WEIGHT = 0.1
MAX_DIFFUSE_WEIGHT = 0.9


class BrdfParams(object):
    """
    Material parameters for a batch of surface points.

    Parameters
    ----------
    a : ArrayLike[float]
        Base color in [0, 1], shape (n, 3).
    m : ArrayLike[float]
        Metallic in [0, 1], shape (n,).
    sigma : ArrayLike[float]
        Roughness in [0, 1], shape (n,).
    validate : bool, optional
        If ``True``, the parameter ranges are checked. Default: ``True``.

    """

    def __init__(self, a, m, sigma, validate=True):
        self.a = np.atleast_2d(np.asarray(a, dtype=float))
        self.m = np.atleast_1d(np.asarray(m, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(sigma, dtype=float))

        if validate:
            for name, values in (("a", self.a), ("m", self.m),
                                 ("sigma", self.sigma)):
                if not np.all((values >= 0.0) & (values <= 1.0)):
                    msg = "BRDF parameter '{}' outside [0, 1].".format(name)
                    raise ValueError(msg)

    def __len__(self):
        return len(self.a)

    def __getitem__(self, key):
        return BrdfParams(self.a[key], self.m[key], self.sigma[key],
                          validate=False)

    def coefficients(self):
        """Return the diffuse and specular coefficients (k_d, k_s)."""
        return coeffs(self.a, self.m)

    def alpha(self):
        """GGX width ``sigma ** 2`` with roughness clamped to SIGMA_MIN."""
        return np.square(np.maximum(self.sigma, SIGMA_MIN))

    @classmethod
    def constant(cls, a, m, sigma, n):
        """Repeat one material ``n`` times."""
        return cls(np.tile(np.asarray(a, dtype=float), (n, 1)),
                   np.full(n, float(m)), np.full(n, float(sigma)))


class LobeSample(object):
    """
    Sampled incident directions.

    Attributes
    ----------
    wi : numpy.ndarray[float]
        Unit incident directions.
    pdf : numpy.ndarray[float]
        Solid-angle density of the full mixture at ``wi``.
    specular : numpy.ndarray[bool]
        ``True`` where the specular lobe was chosen.

    """

    def __init__(self, wi, pdf, specular):
        self.wi = wi
        self.pdf = pdf
        self.specular = specular

    def __len__(self):
        return len(self.wi)


def coeffs(a, m):
    """
    Map base color and metallic to diffuse and specular coefficients.

    Parameters
    ----------
    a : ArrayLike[float]
        Base color, shape (..., 3).
    m : ArrayLike[float]
        Metallic, shape (...).

    Returns
    -------
    k_d, k_s : numpy.ndarray[float]
        ``a (1 - m)`` and ``0.04 (1 - m) + a m``.

    """
    a = np.asarray(a, dtype=float)
    m = np.asarray(m, dtype=float)[..., None]
    return a * (1.0 - m), DIELECTRIC_F0 * (1.0 - m) + a * m


def fresnel_split(h_dot_wi):
    """
    Split Schlick Fresnel into two weights.

    ``k_s * F0 + F1`` equals ``k_s + (1 - k_s) (1 - h.wi)^5``.

    Returns
    -------
    F0, F1 : numpy.ndarray[float]
        ``1 - (1 - h.wi)^5`` and ``(1 - h.wi)^5``.

    """
    c = np.clip(np.asarray(h_dot_wi, dtype=float), 0.0, 1.0)
    f1 = np.power(1.0 - c, 5)
    return 1.0 - f1, f1


def ggx_d(n_dot_h, alpha):
    """GGX normal distribution."""
    n_dot_h = np.asarray(n_dot_h, dtype=float)
    a2 = np.square(alpha)
    denominator = np.square(n_dot_h) * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * np.square(denominator))
    return np.where(n_dot_h > 0, d, 0.0)


def smith_g(n_dot_wi, n_dot_wo, alpha):
    """Separable Smith shadowing-masking with Schlick-GGX, k = alpha/2."""
    k = 0.5 * alpha

    def g1(x):
        x = np.maximum(x, 0.0)
        return x / (x * (1.0 - k) + k)

    return g1(n_dot_wi) * g1(n_dot_wo)


def smith_g1_ggx(n_dot_v, alpha):
    """Exact GGX Smith masking, the normalization of the VNDF."""
    n_dot_v = np.maximum(n_dot_v, 0.0)
    a2 = np.square(alpha)
    return 2.0 * n_dot_v / (n_dot_v + np.sqrt(a2 + (1.0 - a2)
                                              * np.square(n_dot_v)))


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def face_forward(n, wo):
    """Flip normals to the side of ``wo``."""
    side = np.sign(_dot(n, wo))
    side = np.where(side == 0, 1.0, side)
    return n * side[..., None]


def _half_vector(wi, wo):
    h = wi + wo
    length = np.linalg.norm(h, axis=-1, keepdims=True)
    return h / np.maximum(length, 1e-12)


def eval_factored(sigma, wi, wo, n):
    """
    Evaluate the three roughness-only factors of the reflectance.

    For a material with coefficients ``k_d, k_s`` and roughness
    ``sigma``, ``k_d * g_d + k_s * g_s0 + g_s1`` equals ``eval``.

    Parameters
    ----------
    sigma : ArrayLike[float]
        Roughness, clamped to ``SIGMA_MIN``.
    wi, wo, n : numpy.ndarray[float]
        Unit incident, outgoing and normal directions, shape (n, 3).
        The normal is flipped to face ``wo``.

    Returns
    -------
    g_d, g_s0, g_s1 : numpy.ndarray[float]
        ``cos/pi``, ``F0 D G / (4 n.wo)`` and ``F1 D G / (4 n.wo)``,
        all including the cosine term and zero below the horizon.

    """
    alpha = np.square(np.maximum(np.asarray(sigma, dtype=float), SIGMA_MIN))
    n = face_forward(n, wo)
    n_dot_wi = _dot(n, wi)
    n_dot_wo = _dot(n, wo)
    valid = (n_dot_wi > 0) & (n_dot_wo > 0)

    h = _half_vector(wi, wo)
    f0, f1 = fresnel_split(_dot(h, wi))
    dg = ggx_d(_dot(n, h), alpha) * smith_g(n_dot_wi, n_dot_wo, alpha)
    specular = dg / (4.0 * np.where(valid, n_dot_wo, 1.0))

    g_d = np.where(valid, n_dot_wi / np.pi, 0.0)
    g_s0 = np.where(valid, f0 * specular, 0.0)
    g_s1 = np.where(valid, f1 * specular, 0.0)
    return g_d, g_s0, g_s1


def eval(params, wi, wo, n):
    """
    Evaluate the reflectance times the cosine term.

    Parameters
    ----------
    params : BrdfParams
        Materials, one per direction pair.
    wi, wo, n : numpy.ndarray[float]
        Unit directions, shape (n, 3).

    Returns
    -------
    numpy.ndarray[float]
        RGB values ``f(wi, wo) (n.wi)+``, shape (n, 3).

    """
    k_d, k_s = params.coefficients()
    g_d, g_s0, g_s1 = eval_factored(params.sigma, wi, wo, n)
    return k_d * g_d[:, None] + k_s * g_s0[:, None] + g_s1[:, None]


def luminance(rgb):
    """Relative luminance of linear RGB."""
    return np.asarray(rgb, dtype=float) @ LUMINANCE_WEIGHTS


def diffuse_weight(k_d, k_s):
    """Probability of sampling the diffuse lobe."""
    lum_d = luminance(k_d)
    total = lum_d + luminance(k_s)
    weight = np.where(total > 0, lum_d / np.where(total > 0, total, 1.0),
                      0.5)
    return np.clip(weight, MIN_DIFFUSE_WEIGHT, MAX_DIFFUSE_WEIGHT)


def sample_cosine(n, u):
    """
    Cosine-weighted hemisphere sampling around ``n``.

    Parameters
    ----------
    n : numpy.ndarray[float]
        Unit normals, shape (k, 3).
    u : numpy.ndarray[float]
        Uniform numbers, shape (k, 2).

    Returns
    -------
    numpy.ndarray[float]
        Unit directions with density ``cos / pi``.

    """
    r = np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    local = np.stack((r * np.cos(phi), r * np.sin(phi),
                      np.sqrt(np.maximum(0.0, 1.0 - u[:, 0]))), axis=1)
    return to_world(local, n)


def pdf_cosine(wi, n):
    """Density of ``sample_cosine``."""
    return np.maximum(_dot(wi, n), 0.0) / np.pi


def sample_ggx_vndf(wo, n, alpha, u):
    """
    Sample reflected directions from the GGX distribution of visible
    normals.

    Parameters
    ----------
    wo, n : numpy.ndarray[float]
        Unit outgoing directions and normals, shape (k, 3), with
        ``n.wo > 0``.
    alpha : numpy.ndarray[float]
        GGX width, shape (k,).
    u : numpy.ndarray[float]
        Uniform numbers, shape (k, 2).

    Returns
    -------
    numpy.ndarray[float]
        Unit incident directions, possibly below the horizon.

    """
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (len(wo),))
    v = to_local(wo, n)

    # Stretch the view vector to the hemisphere configuration
    vh = np.stack((alpha * v[:, 0], alpha * v[:, 1], v[:, 2]), axis=1)
    vh /= np.linalg.norm(vh, axis=1, keepdims=True)

    length_sq = vh[:, 0] ** 2 + vh[:, 1] ** 2
    inv_length = 1.0 / np.sqrt(np.where(length_sq > 0, length_sq, 1.0))
    t1 = np.where((length_sq > 0)[:, None],
                  np.stack((-vh[:, 1] * inv_length, vh[:, 0] * inv_length,
                            np.zeros(len(vh))), axis=1),
                  np.array([1.0, 0.0, 0.0]))
    t2 = np.cross(vh, t1)

    r = np.sqrt(u[:, 0])
    phi = 2.0 * np.pi * u[:, 1]
    p1 = r * np.cos(phi)
    p2 = r * np.sin(phi)
    s = 0.5 * (1.0 + vh[:, 2])
    p2 = (1.0 - s) * np.sqrt(np.maximum(0.0, 1.0 - p1 * p1)) + s * p2

    nh = (p1[:, None] * t1 + p2[:, None] * t2
          + np.sqrt(np.maximum(0.0, 1.0 - p1 * p1 - p2 * p2))[:, None] * vh)
    ne = np.stack((alpha * nh[:, 0], alpha * nh[:, 1],
                   np.maximum(nh[:, 2], 1e-12)), axis=1)
    ne /= np.linalg.norm(ne, axis=1, keepdims=True)

    wi_local = 2.0 * np.sum(v * ne, axis=1, keepdims=True) * ne - v
    return to_world(wi_local, n)


def pdf_ggx_vndf(wi, wo, n, alpha):
    """Density of ``sample_ggx_vndf``: ``G1(wo) D(h) / (4 n.wo)``."""
    n_dot_wo = _dot(n, wo)
    h = _half_vector(wi, wo)
    density = (smith_g1_ggx(n_dot_wo, alpha) * ggx_d(_dot(n, h), alpha)
               / (4.0 * np.maximum(n_dot_wo, 1e-12)))
    return np.where((n_dot_wo > 0) & (_dot(h, wo) > 0), density, 0.0)


def pdf(params, wi, wo, n):
    """
    Density of ``sample`` for given directions.

    The density is the mixture of the cosine and the visible-normal
    densities, weighted by the lobe probabilities of the material.

    """
    k_d, k_s = params.coefficients()
    weight = diffuse_weight(k_d, k_s)
    n = face_forward(n, wo)
    return (weight * pdf_cosine(wi, n)
            + (1.0 - weight) * pdf_ggx_vndf(wi, wo, n, params.alpha()))


def sample(params, wo, n, u):
    """
    Importance sample incident directions.

    The first uniform number selects the lobe: values below the diffuse
    weight choose the cosine lobe, the rest the GGX lobe. The remaining
    two numbers drive the chosen lobe.

    Parameters
    ----------
    params : BrdfParams
        Materials, one per sample.
    wo, n : numpy.ndarray[float]
        Unit outgoing directions and normals, shape (k, 3).
    u : numpy.ndarray[float]
        Uniform numbers, shape (k, 3).

    Returns
    -------
    LobeSample
        Directions with the mixture density.

    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n = face_forward(n, wo)
    k_d, k_s = params.coefficients()
    weight = diffuse_weight(k_d, k_s)
    specular = u[:, 0] >= weight

    wi = np.empty_like(wo)
    diffuse = ~specular
    if np.any(diffuse):
        wi[diffuse] = sample_cosine(n[diffuse], u[diffuse, 1:])
    if np.any(specular):
        wi[specular] = sample_ggx_vndf(wo[specular], n[specular],
                                       params.alpha()[specular],
                                       u[specular, 1:])

    density = (weight * pdf_cosine(wi, n) + (1.0 - weight)
               * pdf_ggx_vndf(wi, wo, n, params.alpha()))
    return LobeSample(wi, density, specular)


def reflectance(params, wo, n, rng, spp=128):
    """
    Monte Carlo estimate of the directional albedo ``int f cos dwi``.

    Parameters
    ----------
    params : BrdfParams
        Materials, one per point.
    wo, n : numpy.ndarray[float]
        Outgoing directions and normals, shape (k, 3).
    rng : numpy.random.Generator
        Random number source.
    spp : int, optional
        Samples per point. Default: ``128``.

    Returns
    -------
    numpy.ndarray[float]
        RGB albedo per point, shape (k, 3).

    """
    count = len(wo)
    repeat = np.repeat(np.arange(count), spp)
    batch = params[repeat]
    lobe = sample(batch, wo[repeat], n[repeat], rng.random((repeat.size, 3)))
    value = eval(batch, lobe.wi, wo[repeat], n[repeat])
    weight = np.where(lobe.pdf[:, None] > 0,
                      value / np.where(lobe.pdf > 0, lobe.pdf, 1.0)[:, None],
                      0.0)
    return weight.reshape(count, spp, 3).mean(axis=1)
