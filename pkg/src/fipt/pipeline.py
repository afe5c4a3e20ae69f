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
Orchestration of the reconstruction stages.

A run executes, in this order: radiance cache, initial shading bake,
field fit with emission mask, emitter extraction, and ``rounds`` times
a shading refinement followed by another field fit with the emitters
held fixed. Every step writes its artifact into the run folder and the
next steps continue from the artifact read back from disk, so a run
resumed from any step produces the same files as an uninterrupted one.

Run folder layout::

    config.json           full run configuration
    run.lock              present while a process owns the folder
    cache.bin             radiance cache
    shading_{r}/          shading buffers, round 0 is the initial bake
    fields_{r}.ckpt       fields after the fit of round r
    emitters_{r}/         extracted emitters
    fields.ckpt           final fields
    emitters.json         final emitters (and env.pfm)
    loss_curve.csv        per-step losses of all fits
    manifest.json         steps, timings and statistics

"""
import dataclasses
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from os import path
from typing import Optional

import numpy as np

from fipt import fileio
from fipt.configuration import ConfigMixin
from fipt.constants import (BAKE, CACHE, EXTRACT, OPTIMIZE, REFINE, STAGES,
                            as_constant)
from fipt.emitter import (extract_emitters, load_emitters, save_emitters,
                          solve_environment)
from fipt.fields import FieldConfig, SceneFields
from fipt.geometry import build_bvh
from fipt.optimization import (OptimConfig, extract_joint_emitters,
                               optimize_stage2, write_loss_curve)
from fipt.radiancecache import RadianceCache, build_cache
from fipt.renderer import FieldMaterials
from fipt.scene import load_scene
from fipt.shading import (BakeConfig, bake_initial, load_shading, refine,
                          save_shading)

logger = logging.getLogger(__name__)

LOCK_FILE = "run.lock"


class ConfigError(ValueError):
    """Invalid configuration or unusable run folder."""


class StageError(RuntimeError):
    """
    A pipeline stage failed.

    Attributes
    ----------
    stage : str
        Name of the failed stage.

    """

    def __init__(self, stage, cause):
        self.stage = str(stage).lower()
        super().__init__("Stage '{}' failed: {}".format(self.stage, cause))


@dataclass
class PipelineConfig(ConfigMixin):
    """
    Configuration of a full reconstruction run.

    The segmentation grouping of the propagation loss is
    ``optim.grouping``.

    """
    scene: str = ""
    output: str = "run"
    bake: BakeConfig = field(default_factory=BakeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    fields: FieldConfig = field(default_factory=FieldConfig)
    rounds: int = 2
    joint_emission: bool = False
    skip_stage3: bool = False
    no_radiance_cache: bool = False
    reextract: bool = False
    cache_resolution: int = 256
    environment_resolution: Optional[int] = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be at least 1.")
        if self.workers < 1 or self.cache_resolution < 1:
            raise ConfigError("workers and cache_resolution must be "
                              "positive.")
        if self.environment_resolution is not None \
                and self.environment_resolution < 1:
            raise ConfigError("environment_resolution must be positive.")
        if self.joint_emission and self.reextract:
            raise ConfigError("Re-extraction needs the emission mask and "
                              "cannot be combined with joint emission.")

    @property
    def grouping(self):
        """Segmentation grouping of the propagation loss."""
        return self.optim.grouping

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        for name, config_class in (("bake", BakeConfig),
                                   ("optim", OptimConfig),
                                   ("fields", FieldConfig)):
            if isinstance(values.get(name), dict):
                try:
                    values[name] = config_class.from_dict(values[name])
                except ValueError as error:
                    raise ConfigError(str(error))
        try:
            return super().from_dict(values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as error:
            raise ConfigError(str(error))


def plan_steps(config):
    """The ``(stage, round)`` steps of a run in execution order."""
    steps = [(CACHE, 0), (BAKE, 0), (OPTIMIZE, 0), (EXTRACT, 0)]
    if not config.skip_stage3:
        for r in range(1, config.rounds + 1):
            steps += [(REFINE, r), (OPTIMIZE, r)]
            if config.reextract:
                steps.append((EXTRACT, r))
    return steps


def _step_seed(config, index):
    return int(np.random.SeedSequence([config.seed, index])
               .generate_state(1)[0])


class _RunLock(object):
    """Exclusive ownership of a run folder."""

    def __init__(self, folder):
        self.file_name = path.join(folder, LOCK_FILE)

    def __enter__(self):
        try:
            descriptor = os.open(self.file_name,
                                 os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            msg = "Run folder '{}' is locked by another process; remove " \
                "'{}' if that process is gone.".format(
                    path.dirname(self.file_name), LOCK_FILE)
            raise ConfigError(msg)
        os.write(descriptor, str(os.getpid()).encode("ascii"))
        os.close(descriptor)
        return self

    def __exit__(self, exc_type, exc_value, exc_traceback):
        os.remove(self.file_name)


class _RunState(object):
    """Artifacts of the steps executed so far."""

    def __init__(self, scene):
        self.scene = scene
        self.bvh = build_bvh(scene.mesh)
        self.cache = None
        self.shadings = None
        self.fields = None
        self.emitters = None


def _artifact(stage, r):
    if stage == CACHE:
        return "cache.bin"
    if stage in (BAKE, REFINE):
        return "shading_{}".format(r)
    if stage == OPTIMIZE:
        return "fields_{}.ckpt".format(r)
    return path.join("emitters_{}".format(r), "emitters.json")


def _load_step(folder, state, stage, r):
    """Read the artifact of a step into the state."""
    artifact = path.join(folder, _artifact(stage, r))
    if not path.exists(artifact):
        msg = "Missing artifact '{}' of stage '{}' (round {}).".format(
            artifact, str(stage).lower(), r)
        raise ConfigError(msg)
    if stage == CACHE:
        state.cache = RadianceCache.load(artifact)
    elif stage in (BAKE, REFINE):
        state.shadings = load_shading(artifact)
    elif stage == OPTIMIZE:
        state.fields = SceneFields.load(artifact)
    else:
        state.emitters = load_emitters(artifact)


def _run_step(config, folder, state, stage, r, seed):
    """Execute one step, write its artifact and return statistics."""
    scene, bvh = state.scene, state.bvh
    artifact = path.join(folder, _artifact(stage, r))

    if stage == CACHE:
        cache = build_cache(scene, bvh, config.cache_resolution,
                            config.workers)
        cache.save(artifact)
        return cache.stats()

    if stage in (BAKE, REFINE):
        bake = dataclasses.replace(config.bake, seed=seed,
                                   workers=config.workers)
        if stage == BAKE:
            shadings = bake_initial(scene, bvh, state.cache, bake)
        else:
            if state.fields is None or state.emitters is None:
                raise ConfigError("Refinement needs fitted fields and "
                                  "extracted emitters.")
            bake = dataclasses.replace(
                bake, use_radiance_cache=not config.no_radiance_cache)
            shadings = refine(scene, bvh, state.cache,
                              FieldMaterials(state.fields.brdf),
                              state.emitters, bake)
        save_shading(shadings, artifact, bake)
        return {"views": shadings.stats()}

    if stage == OPTIMIZE:
        if state.shadings is None:
            raise ConfigError("Fitting needs baked shadings.")
        fields = state.fields
        if fields is None:
            fields = SceneFields(scene.aabb, dataclasses.replace(
                config.fields, seed=seed))
        optim = dataclasses.replace(config.optim, seed=seed)
        known = None if r == 0 or config.reextract else state.emitters
        optimize_stage2(scene, state.shadings, fields, optim,
                        emitters_known=known,
                        joint_emission=config.joint_emission and r == 0,
                        dump_folder=path.join(folder, "divergence"))
        fields.save(artifact)
        write_loss_curve(fields.loss_history,
                         path.join(folder, "loss_curve.csv"))
        last = fields.loss_history[-1] if fields.loss_history else {}
        return {"final_loss": last.get("total"),
                "steps": sum(1 for h in fields.loss_history
                             if h["fit"] == last.get("fit"))}

    if state.fields is None:
        raise ConfigError("Emitter extraction needs fitted fields.")
    if config.joint_emission:
        emitters = extract_joint_emitters(state.fields, len(scene.mesh),
                                          config.optim.joint_threshold)
        if config.environment_resolution:
            emitters = emitters.with_environment(solve_environment(
                scene, bvh, config.environment_resolution))
    else:
        emitters = extract_emitters(
            scene, bvh, state.fields.mask, seed=seed,
            environment_resolution=config.environment_resolution)
    save_emitters(emitters, path.dirname(artifact))
    return {"emitters": len(emitters)}


def _execute(config, folder, state, start, manifest):
    steps = plan_steps(config)
    for index in range(start, len(steps)):
        stage, r = steps[index]
        name = str(stage).lower()
        logger.info("Step %d/%d: %s (round %d)", index + 1, len(steps),
                    name, r)
        began = time.perf_counter()
        try:
            stats = _run_step(config, folder, state, stage, r,
                              _step_seed(config, index))
            _load_step(folder, state, stage, r)
        except ConfigError:
            raise
        except Exception as error:
            fileio.write_json(path.join(folder, "manifest.json"), manifest)
            raise StageError(stage, error) from error
        manifest["steps"].append({
            "stage": name, "round": r, "artifact": _artifact(stage, r),
            "seconds": time.perf_counter() - began, "stats": stats})

    state.fields.save(path.join(folder, "fields.ckpt"))
    save_emitters(state.emitters, folder)
    manifest["complete"] = True
    fileio.write_json(path.join(folder, "manifest.json"), manifest)
    return manifest


def run(config):
    """
    Run the full reconstruction.

    Parameters
    ----------
    config : PipelineConfig
        Run configuration. ``config.output`` must not hold a complete
        run or be locked.

    Returns
    -------
    dict
        The run manifest.

    Raises
    ------
    ConfigError
        For an invalid scene path or a locked run folder.
    StageError
        If a stage fails. Artifacts of finished steps remain for
        ``resume``.

    """
    if not path.isfile(config.scene):
        msg = "Scene descriptor '{}' does not exist.".format(config.scene)
        raise ConfigError(msg)
    config = dataclasses.replace(config, scene=path.abspath(config.scene))
    folder = config.output
    fileio.create_folder(folder)
    with _RunLock(folder):
        if path.isfile(path.join(folder, "manifest.json")):
            warnings.warn("Overwriting the run in '{}'.".format(folder))
        fileio.write_json(path.join(folder, "config.json"),
                          config.to_dict())
        state = _RunState(load_scene(config.scene))
        manifest = {"seed": config.seed, "steps": [], "complete": False}
        return _execute(config, folder, state, 0, manifest)


def resume(folder, from_stage, seed=None, force=False):
    """
    Continue a run from a stage with the artifacts of earlier steps.

    Parameters
    ----------
    folder : str
        Run folder written by ``run``.
    from_stage : str or FiptConstant
        First stage to execute again. Its first occurrence in the run is
        used.
    seed : int, optional
        Expected run seed. A different seed is refused unless ``force``
        is set, in which case the new seed is used.
    force : bool, optional
        Accept a changed seed. Default: ``False``.

    Returns
    -------
    dict
        The run manifest.

    """
    config_file = path.join(folder, "config.json")
    if not path.isfile(config_file):
        msg = "'{}' is not a run folder.".format(folder)
        raise ConfigError(msg)
    config = PipelineConfig.from_dict(fileio.read_json(config_file))
    if seed is not None and seed != config.seed:
        msg = "Run '{}' used seed {}, resuming with seed {}.".format(
            folder, config.seed, seed)
        warnings.warn(msg)
        if not force:
            raise ConfigError(msg + " Pass force to accept this.")
        config = dataclasses.replace(config, seed=seed)

    try:
        from_stage = as_constant(from_stage, *STAGES)
    except ValueError as error:
        raise ConfigError(str(error))
    steps = plan_steps(config)
    start = next((i for i, (stage, _) in enumerate(steps)
                  if stage == from_stage), None)
    if start is None:
        msg = "Stage '{}' is not part of this run.".format(from_stage)
        raise ConfigError(msg)

    with _RunLock(folder):
        if config.seed != fileio.read_json(config_file)["seed"]:
            fileio.write_json(config_file, config.to_dict())
        state = _RunState(load_scene(config.scene))
        for stage, r in steps[:start]:
            _load_step(folder, state, stage, r)

        manifest_file = path.join(folder, "manifest.json")
        manifest = {"seed": config.seed, "steps": [], "complete": False}
        if path.isfile(manifest_file):
            previous = fileio.read_json(manifest_file)
            manifest["steps"] = previous.get("steps", [])[:start]
        logger.info("Resuming '%s' at step %d (%s)", folder, start + 1,
                    str(from_stage).lower())
        return _execute(config, folder, state, start, manifest)
