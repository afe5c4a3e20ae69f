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
Quality metrics of reconstructed materials, emitters and renders.

"""
import logging
from os import path

import numpy as np

from fipt import fileio
from fipt.constants import DIFFUSE_THRESHOLD, METRIC_GAMMA, PSNR_CAP
from fipt.emitter import load_emitters
from fipt.geometry import build_bvh
from fipt.renderer import (FieldMaterials, load_materials, path_trace,
                           predict_maps)

logger = logging.getLogger(__name__)


def _check_shapes(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        msg = "Shape mismatch: prediction {} vs reference {}.".format(
            pred.shape, gt.shape)
        raise ValueError(msg)
    return pred, gt


def psnr(pred, gt, mask=None, cap=PSNR_CAP):
    """
    Peak signal-to-noise ratio for values in [0, 1].

    Parameters
    ----------
    pred, gt : ArrayLike[float]
        Arrays of equal shape, e.g. (height, width, 3).
    mask : ArrayLike[bool], optional
        Pixels to compare, shape (height, width). Default: all.
    cap : float, optional
        Returned for identical inputs. Default: ``99``.

    Returns
    -------
    float
        PSNR in dB, at most ``cap``; ``nan`` for an empty mask.

    """
    pred, gt = _check_shapes(pred, gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, gt = pred[mask], gt[mask]
    if pred.size == 0:
        return float("nan")
    mse = float(np.mean(np.square(pred - gt)))
    if mse == 0.0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


def emitter_iou(pred_triangles, gt_triangles):
    """Intersection over union of two sets of emitter triangles."""
    pred = set(np.asarray(pred_triangles, dtype=np.int64).tolist())
    gt = set(np.asarray(gt_triangles, dtype=np.int64).tolist())
    union = pred | gt
    if not union:
        return 1.0
    return len(pred & gt) / len(union)


def log_l2(pred, gt, mask=None):
    """
    Mean squared difference of ``log(1 + x)`` over masked pixels.

    Returns 0 for an empty mask.

    """
    pred, gt = _check_shapes(pred, gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        pred, gt = pred[mask], gt[mask]
    if pred.size == 0:
        return 0.0
    return float(np.mean(np.square(np.log1p(np.maximum(pred, 0.0))
                                   - np.log1p(np.maximum(gt, 0.0)))))


def tonemapped_psnr(pred, gt, mask=None, gamma=METRIC_GAMMA):
    """PSNR after ``gamma_tonemap`` of both inputs."""
    return psnr(fileio.gamma_tonemap(pred, gamma),
                fileio.gamma_tonemap(gt, gamma), mask)


def _read_gt_map(gt_folder, view, name):
    return fileio.read_pfm(path.join(gt_folder, "view_{}".format(view),
                                     name + ".pfm")).data


def _mean(values):
    values = [v for v in values if np.isfinite(v)]
    return float(np.mean(values)) if values else float("nan")


def evaluate_run(scene, fields, emitters, gt_folder, config=None,
                 views=None, albedo_spp=128, render=True):
    """
    Compare a reconstruction with the ground truth of a synthetic scene.

    Parameters
    ----------
    scene : Scene
        The captured scene.
    fields : SceneFields
        Estimated fields.
    emitters : EmitterSet
        Estimated emitters.
    gt_folder : str
        The ``gt`` folder written by ``gen_synthetic``.
    config : RenderConfig, optional
        Path tracer settings for view synthesis and relighting.
    views : Sequence[int], optional
        Views to evaluate. Default: all.
    albedo_spp : int, optional
        Samples of the albedo estimate. Default: ``128``.
    render : bool, optional
        If ``False``, view synthesis and relighting are skipped.

    Returns
    -------
    dict
        Mean per-view PSNRs of the tone-mapped ``kd`` (diffuse surfaces
        only), ``albedo`` and ``roughness`` maps, emitter IoU, emission
        log L2 over ground-truth emitter pixels and, if rendered, the
        PSNRs of re-rendered views and relit views.

    """
    bvh = build_bvh(scene.mesh)
    views = list(range(scene.number_of_views)) if views is None else views
    gt_emitters = load_emitters(path.join(gt_folder, "emitters.json"))
    materials = FieldMaterials(fields.brdf)

    per_view = {"kd_psnr": [], "albedo_psnr": [], "roughness_psnr": [],
                "emission_log_l2": []}
    for view in views:
        pred = predict_maps(scene.mesh, materials, emitters,
                            scene.cameras[view], bvh, albedo_spp, stream=view)
        gt = {name: _read_gt_map(gt_folder, view, name)
              for name in ("kd", "albedo", "roughness", "emission",
                           "emission_mask")}
        gt_mask = gt["emission_mask"][:, :, 0] > 0.5
        surface = pred["hit"] & ~gt_mask
        gt_diffuse = surface \
            & (_read_gt_map(gt_folder, view, "metallic")[:, :, 0] < 1e-6) \
            & (gt["roughness"][:, :, 0] > DIFFUSE_THRESHOLD)
        per_view["kd_psnr"].append(
            tonemapped_psnr(pred["kd"], gt["kd"], gt_diffuse))
        per_view["albedo_psnr"].append(
            tonemapped_psnr(pred["albedo"], gt["albedo"], surface))
        per_view["roughness_psnr"].append(
            tonemapped_psnr(pred["roughness"], gt["roughness"], surface))
        per_view["emission_log_l2"].append(
            log_l2(pred["emission"], gt["emission"], gt_mask)
            if np.any(gt_mask) else float("nan"))

    report = {k: _mean(v) for k, v in per_view.items()}
    report["emitter_iou"] = emitter_iou(emitters.triangles,
                                        gt_emitters.triangles)
    report["views"] = len(views)

    if render:
        report["view_psnr"] = _mean([
            tonemapped_psnr(
                path_trace(scene.mesh, materials, emitters,
                           scene.cameras[v], config, bvh, stream=v).data,
                scene.frames[v].data)
            for v in views])
        relight_file = path.join(gt_folder, "relight", "emitters.json")
        if path.isfile(relight_file):
            relight = load_emitters(relight_file)
            gt_materials = load_materials(path.join(gt_folder,
                                                    "materials.json"))
            report["relight_psnr"] = _mean([
                tonemapped_psnr(
                    path_trace(scene.mesh, materials, relight,
                               scene.cameras[v], config, bvh,
                               stream=v).data,
                    path_trace(scene.mesh, gt_materials, relight,
                               scene.cameras[v], config, bvh,
                               stream=v).data)
                for v in views])

    logger.info("Evaluation: %s", ", ".join(
        "{}={:.4g}".format(k, v) for k, v in sorted(report.items())))
    return report
