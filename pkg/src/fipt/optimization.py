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
Fitting of the material field and the emission mask to baked shadings.

``optimize_stage2`` runs Adam over shuffled batches of training pixels
and minimizes the masked render loss plus the emission, diffuse and
propagation regularizers. With ``joint_emission=True`` the mask is
replaced by a per-triangle emission that is fitted together with the
materials.

"""
import logging
import tempfile
import time
from dataclasses import dataclass
from os import path
from typing import Optional

import numpy as np

from fipt import losses
from fipt.configuration import ConfigMixin
from fipt.constants import LUMINANCE_WEIGHTS, PART, SEMANTIC, as_constant
from fipt.emitter import EmitterSet
from fipt.fields import (JOINT_EMISSION_BLOCK, NonFiniteGradientError,
                         check_gradients, normalize_positions)
from fipt.fileio import FileManager, write_json
from fipt.shading import factorized_render

logger = logging.getLogger(__name__)

LOSS_TERMS = ("render", "emission", "diffuse", "propagation", "joint",
              "total")


class DivergenceError(ArithmeticError):
    """
    Raised when the loss becomes non-finite.

    Attributes
    ----------
    dump_path : str
        Folder with the checkpoint and state at the failing step.

    """

    def __init__(self, dump_path, epoch, step):
        self.dump_path = dump_path
        super().__init__(
            "Non-finite loss at epoch {}, step {}; state dumped to '{}'."
            .format(epoch, step, dump_path))


@dataclass
class OptimConfig(ConfigMixin):
    """Settings of the material and mask fit."""
    lr: float = 1e-3
    batch_size: int = 8192
    epochs: int = 2
    lambda_emission: float = 1.0
    lambda_diffuse: float = 5e-4
    lambda_propagation: Optional[float] = None
    sigma_a: float = 1.6e-2
    sigma_x: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grouping: str = "part"
    lambda_joint: float = 1e-4
    joint_threshold: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.grouping = str(as_constant(self.grouping, PART, SEMANTIC))\
            .lower()
        if self.lambda_propagation is None:
            self.lambda_propagation = 5e-3 if self.grouping == "part" \
                else 1e-3
        if self.lr < 0:
            raise ValueError("lr must not be negative.")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive.")
        for name in ("lambda_emission", "lambda_diffuse",
                     "lambda_propagation", "lambda_joint"):
            if getattr(self, name) < 0:
                raise ValueError("{} must not be negative.".format(name))
        if self.sigma_a <= 0 or self.sigma_x <= 0 or self.epsilon <= 0:
            raise ValueError("sigma_a, sigma_x and epsilon must be "
                             "positive.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1).")
        if not 0 < self.joint_threshold < 1:
            raise ValueError("joint_threshold must lie in (0, 1).")


class Adam(object):
    """
    Adam with bias-corrected moments.

    Parameters are updated in place. Moments are created lazily per
    parameter name.

    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        """Apply one update to every parameter that has a gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for k in sorted(grads):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros(params[k].shape)
                self.v[k] = np.zeros(params[k].shape)
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[k] * (1.0 / bc2)) + self.epsilon
            params[k] -= step_size * self.m[k] / denom


def gather_training_pixels(scene, shadings, grouping=PART,
                           exclude_triangles=None):
    """
    Collect all pixels with a primary hit into one flat batch.

    Parameters
    ----------
    scene : Scene
        Frames and segment labels.
    shadings : ShadingBuffers
        Baked shadings of all views.
    grouping : str or FiptConstant, optional
        Which labels become the propagation groups. Default: ``PART``.
    exclude_triangles : callable, optional
        Maps triangle indices to a mask of samples to drop, e.g.
        ``EmitterSet.is_emitter``.

    Returns
    -------
    TrainingPixels

    """
    labels = scene.labels(grouping)
    columns = {k: [] for k in ("views", "pixels", "triangles", "positions",
                               "radiance", "ld", "ls0", "ls1")}
    for view, shading in enumerate(shadings.views):
        pixels = np.flatnonzero(shading.valid)
        triangles = shading.triangles[pixels]
        if exclude_triangles is not None and len(pixels):
            keep = ~np.asarray(exclude_triangles(triangles), dtype=bool)
            pixels, triangles = pixels[keep], triangles[keep]
        columns["views"].append(np.full(len(pixels), view))
        columns["pixels"].append(pixels)
        columns["triangles"].append(triangles)
        columns["positions"].append(shading.positions[pixels])
        columns["radiance"].append(
            scene.frames[view].data.reshape(-1, 3)[pixels])
        columns["ld"].append(shading.ld[pixels])
        columns["ls0"].append(shading.ls0[:, pixels])
        columns["ls1"].append(shading.ls1[:, pixels])

    stacked = {k: np.concatenate(v, axis=1 if k in ("ls0", "ls1") else 0)
               for k, v in columns.items()}
    if len(stacked["pixels"]) == 0:
        raise ValueError("No training pixels with a primary hit.")
    return losses.TrainingPixels(
        stacked["views"], stacked["pixels"], stacked["triangles"],
        stacked["positions"],
        normalize_positions(stacked["positions"], scene.aabb),
        stacked["radiance"], stacked["ld"], stacked["ls0"], stacked["ls1"],
        labels[stacked["triangles"]])


def _objective(batch, fields, config, fit_mask, fit_joint):
    """Loss terms and parameter gradients of one batch."""
    n = len(batch)
    indices = np.arange(n)
    terms = dict.fromkeys(LOSS_TERMS, 0.0)

    outputs, brdf_cache = fields.brdf.forward(batch.x)
    a = outputs[:, :3].astype(float)
    m = outputs[:, 3].astype(float)
    sigma = outputs[:, 4].astype(float)
    rendered, (d_a_render, d_m_render, d_sigma_render) = factorized_render(
        batch, indices, a, m, sigma, gradients=True)

    if fit_joint:
        emission = np.exp(fields.log_emission[batch.triangles].astype(float))
        rendered = rendered + emission
    if fit_mask:
        alpha, e, mask_cache = fields.mask.forward(batch.x)
        alpha = alpha.astype(float)
    else:
        alpha = np.zeros(n)

    terms["render"], d_rendered, d_alpha = losses.masked_render(
        rendered, batch.radiance, alpha)
    d_a = d_rendered * d_a_render
    d_m = np.sum(d_rendered * d_m_render, axis=1)
    d_sigma = np.sum(d_rendered * d_sigma_render, axis=1)

    terms["diffuse"], dm, ds = losses.diffuse_prior(m, sigma,
                                                    config.lambda_diffuse)
    d_m += dm
    d_sigma += ds

    if config.lambda_propagation > 0:
        if config.grouping == "part":
            highlight = losses.highlight_magnitude(batch, indices, a, m,
                                                   sigma)
            terms["propagation"], dm, ds = losses.part_propagation(
                batch.groups, m, sigma, highlight, config.lambda_propagation)
        else:
            terms["propagation"], dm, ds = losses.semantic_propagation(
                batch.groups, m, sigma, a, batch.x,
                config.lambda_propagation, config.sigma_a, config.sigma_x)
        d_m += dm
        d_sigma += ds

    d_outputs = np.concatenate([d_a, d_m[:, None], d_sigma[:, None]],
                               axis=1)
    gradients = fields.brdf.backward(brdf_cache, d_outputs)

    if fit_mask:
        terms["emission"], d_e = losses.emission_l1(
            e.astype(float), config.lambda_emission)
        gradients.update(fields.mask.backward(mask_cache, d_alpha, d_e))

    if fit_joint:
        terms["joint"] = float(config.lambda_joint
                               * np.sum(emission) / max(n, 1))
        d_emission = (d_rendered + config.lambda_joint / max(n, 1)) \
            * emission
        grad = np.zeros(fields.log_emission.shape)
        for c in range(3):
            grad[:, c] = np.bincount(batch.triangles,
                                     weights=d_emission[:, c],
                                     minlength=len(grad))
        gradients[JOINT_EMISSION_BLOCK] = grad
        check_gradients({JOINT_EMISSION_BLOCK: grad})

    terms["total"] = float(sum(terms[k] for k in LOSS_TERMS[:-1]))
    return terms, gradients


def _dump_state(fields, terms, epoch, step, dump_folder):
    if dump_folder is None:
        dump_folder = tempfile.mkdtemp(prefix="fipt_divergence_")
    fields.save(path.join(dump_folder, "fields.ckpt"))
    write_json(path.join(dump_folder, "state.json"),
               {"epoch": epoch, "step": step,
                "terms": {k: repr(v) for k, v in terms.items()}})
    return dump_folder


def optimize_stage2(scene, shadings, fields, config=None,
                    emitters_known=None, joint_emission=False,
                    dump_folder=None):
    """
    Fit the material field and the emission mask to the shadings.

    Parameters
    ----------
    scene : Scene
        Frames, geometry and segment labels.
    shadings : ShadingBuffers
        Baked shadings of all views.
    fields : SceneFields
        Fields to update in place.
    config : OptimConfig, optional
        Optimizer settings. Default: ``OptimConfig()``.
    emitters_known : EmitterSet, optional
        If given, the mask stays frozen and pixels of emitter triangles
        are left out of the loss.
    joint_emission : bool, optional
        Fit a per-triangle emission with the materials instead of the
        mask. Default: ``False``.
    dump_folder : str, optional
        Where the state is written if the loss diverges. Default: a new
        temporary folder.

    Returns
    -------
    SceneFields
        The updated fields. Their ``loss_history`` has one record per
        step appended.

    Raises
    ------
    DivergenceError
        If a loss becomes non-finite.

    """
    config = config or OptimConfig()
    exclude = emitters_known.is_emitter if emitters_known is not None \
        else None
    pixels = gather_training_pixels(scene, shadings, config.grouping,
                                    exclude)
    fit_mask = emitters_known is None and not joint_emission
    if joint_emission and fields.log_emission is None:
        fields.log_emission = np.full((len(scene.mesh), 3), np.log(1e-2),
                                      dtype=fields.brdf.dtype)

    params = dict(fields.brdf.params)
    if fit_mask:
        params.update(fields.mask.params)
    if joint_emission:
        params[JOINT_EMISSION_BLOCK] = fields.log_emission
    optimizer = Adam(config.lr, config.beta1, config.beta2, config.epsilon)
    rng = np.random.default_rng(config.seed)

    logger.info("Fitting fields on %d pixels, %d epochs, batch %d",
                len(pixels), config.epochs, config.batch_size)
    start = time.perf_counter()
    fit = 1 + max([r["fit"] for r in fields.loss_history], default=-1)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(pixels))
        epoch_terms = []
        for begin in range(0, len(order), config.batch_size):
            batch = pixels.subset(order[begin:begin + config.batch_size])
            try:
                terms, gradients = _objective(batch, fields, config,
                                              fit_mask, joint_emission)
            except NonFiniteGradientError as error:
                logger.error("%s", error)
                terms = dict.fromkeys(LOSS_TERMS, float("nan"))
            if not np.all(np.isfinite(list(terms.values()))):
                raise DivergenceError(
                    _dump_state(fields, terms, epoch, step, dump_folder),
                    epoch, step)
            optimizer.step(params,
                           {k: g for k, g in gradients.items()
                            if k in params})
            record = {"fit": fit, "epoch": epoch, "step": step}
            record.update(terms)
            fields.loss_history.append(record)
            epoch_terms.append(terms["total"])
            step += 1
        logger.info("Epoch %d: mean loss %.6g", epoch,
                    float(np.mean(epoch_terms)))
    logger.debug("Field fit took %.2f s", time.perf_counter() - start)
    return fields


def extract_joint_emitters(fields, number_of_triangles, threshold=0.1):
    """
    Emitters of a joint emission fit.

    A triangle emits if the luminance of its fitted emission exceeds
    ``threshold`` times the largest luminance. Its radiance is the
    fitted value.

    """
    emission = fields.joint_emission()
    if emission is None:
        raise ValueError("The fields carry no joint emission fit.")
    luminance = emission @ LUMINANCE_WEIGHTS
    if luminance.size == 0 or luminance.max() <= 0:
        return EmitterSet([], np.zeros((0, 3)),
                          number_of_triangles=number_of_triangles)
    triangles = np.flatnonzero(luminance > threshold * luminance.max())
    return EmitterSet(triangles, emission[triangles],
                      number_of_triangles=number_of_triangles)


def write_loss_curve(history, file_name):
    """Write per-step loss records as CSV."""
    columns = ("fit", "epoch", "step") + LOSS_TERMS
    with FileManager(file_name, "w") as csv_file:
        csv_file.write(",".join(columns) + "\n")
        for record in history:
            csv_file.write(",".join(str(record[c]) for c in columns) + "\n")
