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
Command line interface.

Every stage of the pipeline is a subcommand; ``fipt run`` executes all
of them from one JSON config. Each ``BakeConfig`` and ``OptimConfig``
option can be overridden with a generated flag such as
``--bake-spp-diffuse`` or ``--optim-lr``.

Exit codes: 0 on success, 2 for configuration errors, 3 if a stage
fails.

"""
import argparse
import dataclasses
import logging
import sys
from os import path

from fipt import fileio
from fipt.constants import STAGES
from fipt.emitter import extract_emitters, load_emitters, save_emitters
from fipt.fields import SceneFields
from fipt.geometry import build_bvh
from fipt.metrics import evaluate_run
from fipt.optimization import (OptimConfig, extract_joint_emitters,
                               optimize_stage2, write_loss_curve)
from fipt.pipeline import ConfigError, PipelineConfig, StageError, resume, run
from fipt.radiancecache import RadianceCache, build_cache
from fipt.renderer import FieldMaterials, RenderConfig, path_trace
from fipt.scene import load_scene
from fipt.shading import (BakeConfig, bake_initial, load_shading, refine,
                          save_shading)
from fipt.synthetic import gen_synthetic, load_spec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _parse_bool(text):
    value = str(text).lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError("Expected a boolean, got '{}'."
                                     .format(text))


def _flag_type(config_field):
    if config_field.type is bool:
        return _parse_bool
    if config_field.type in (int, float, str):
        return config_field.type
    return float


def _add_config_flags(parser, prefix, config_class):
    """Add one ``--{prefix}-{option}`` flag per config option."""
    group = parser.add_argument_group("{} options".format(prefix))
    for config_field in dataclasses.fields(config_class):
        flag = "--{}-{}".format(prefix, config_field.name.replace("_", "-"))
        group.add_argument(flag, type=_flag_type(config_field), default=None,
                           dest="{}_{}".format(prefix, config_field.name),
                           metavar=config_field.name.upper())


def _overrides(args, prefix, config_class):
    overrides = {}
    for name in config_class.option_names():
        value = getattr(args, "{}_{}".format(prefix, name), None)
        if value is not None:
            overrides[name] = value
    return overrides


def _apply_overrides(config, args, prefix):
    overrides = _overrides(args, prefix, type(config))
    if "grouping" in overrides and "lambda_propagation" not in overrides:
        overrides["lambda_propagation"] = None
    return dataclasses.replace(config, **overrides) if overrides else config


def _bake_config(args):
    return _apply_overrides(BakeConfig(), args, "bake")


def _optim_config(args):
    return _apply_overrides(OptimConfig(), args, "optim")


def _cmd_gen(args):
    spec = load_spec(args.spec)
    gen_synthetic(spec, args.output, workers=args.workers)


def _cmd_cache(args):
    scene = load_scene(args.scene)
    cache = build_cache(scene, build_bvh(scene.mesh), args.resolution,
                        args.workers)
    cache.save(args.output)


def _cmd_bake(args):
    scene = load_scene(args.scene)
    config = _bake_config(args)
    shadings = bake_initial(scene, build_bvh(scene.mesh),
                            RadianceCache.load(args.cache), config)
    save_shading(shadings, args.output, config)


def _cmd_optimize(args):
    scene = load_scene(args.scene)
    fields = SceneFields.load(args.fields) if args.fields \
        else SceneFields(scene.aabb)
    emitters = load_emitters(args.emitters) if args.emitters else None
    optimize_stage2(scene, load_shading(args.shading), fields,
                    _optim_config(args), emitters_known=emitters,
                    joint_emission=args.joint_emission)
    fields.save(args.output)
    write_loss_curve(fields.loss_history,
                     path.splitext(args.output)[0] + "_loss.csv")


def _cmd_extract(args):
    scene = load_scene(args.scene)
    fields = SceneFields.load(args.fields)
    if fields.log_emission is not None:
        emitters = extract_joint_emitters(fields, len(scene.mesh),
                                          args.joint_threshold)
    else:
        emitters = extract_emitters(
            scene, build_bvh(scene.mesh), fields.mask, seed=args.seed,
            environment_resolution=args.environment_resolution)
    save_emitters(emitters, args.output)


def _cmd_refine(args):
    scene = load_scene(args.scene)
    config = _bake_config(args)
    fields = SceneFields.load(args.fields)
    shadings = refine(scene, build_bvh(scene.mesh),
                      RadianceCache.load(args.cache),
                      FieldMaterials(fields.brdf),
                      load_emitters(args.emitters), config)
    save_shading(shadings, args.output, config)


def _cmd_run(args):
    values = fileio.read_json(args.config) if args.config else {}
    config = PipelineConfig.from_dict(values)
    overrides = {name: getattr(args, name) for name in
                 ("scene", "output", "rounds", "seed", "workers")
                 if getattr(args, name) is not None}
    for name in ("joint_emission", "skip_stage3", "no_radiance_cache",
                 "reextract"):
        if getattr(args, name):
            overrides[name] = True
    try:
        config = dataclasses.replace(
            config, bake=_apply_overrides(config.bake, args, "bake"),
            optim=_apply_overrides(config.optim, args, "optim"),
            **overrides)
    except ValueError as error:
        raise ConfigError(str(error))
    run(config)


def _cmd_resume(args):
    resume(args.run_dir, args.from_stage, seed=args.seed, force=args.force)


def _cmd_render(args):
    scene = load_scene(args.scene)
    fields = SceneFields.load(args.fields)
    emitters = load_emitters(args.relight or args.emitters)
    config = RenderConfig(spp=args.spp, seed=args.seed,
                          workers=args.workers)
    bvh = build_bvh(scene.mesh)
    views = args.view if args.view else range(scene.number_of_views)
    for view in views:
        image = path_trace(scene.mesh, FieldMaterials(fields.brdf), emitters,
                           scene.cameras[view], config, bvh, stream=view)
        base = path.join(args.output, "view_{}".format(view))
        fileio.write_pfm(image, base + ".pfm")
        fileio.write_png(image.data, base + ".png", config.gamma)


def _cmd_eval(args):
    scene = load_scene(args.scene)
    fields = SceneFields.load(path.join(args.run_dir, "fields.ckpt"))
    emitters = load_emitters(path.join(args.run_dir, "emitters.json"))
    report = evaluate_run(scene, fields, emitters, args.gt,
                          RenderConfig(spp=args.spp, seed=args.seed,
                                       workers=args.workers),
                          render=not args.no_render)
    fileio.write_json(args.output or path.join(args.run_dir,
                                               "metrics.json"), report)


def build_parser():
    """Create the argument parser with all subcommands."""
    parser = argparse.ArgumentParser(
        prog="fipt",
        description="Factorized inverse path tracing for indoor scenes.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true",
                           help="Log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true",
                           help="Log warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="Render a synthetic dataset")
    gen.add_argument("spec", help="GtSceneSpec JSON file")
    gen.add_argument("output", help="Output folder")
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(handler=_cmd_gen)

    cache = commands.add_parser("cache", help="Build the radiance cache")
    cache.add_argument("scene", help="Scene descriptor")
    cache.add_argument("output", help="Output .bin file")
    cache.add_argument("--resolution", type=int, default=256)
    cache.add_argument("--workers", type=int, default=1)
    cache.set_defaults(handler=_cmd_cache)

    bake = commands.add_parser("bake", help="Bake the initial shadings")
    bake.add_argument("scene")
    bake.add_argument("cache", help="Radiance cache .bin file")
    bake.add_argument("output", help="Output shading folder")
    _add_config_flags(bake, "bake", BakeConfig)
    bake.set_defaults(handler=_cmd_bake)

    optimize = commands.add_parser("optimize",
                                   help="Fit materials and emission mask")
    optimize.add_argument("scene")
    optimize.add_argument("shading", help="Shading folder")
    optimize.add_argument("output", help="Output .ckpt file")
    optimize.add_argument("--fields", help="Checkpoint to continue from")
    optimize.add_argument("--emitters",
                          help="Known emitters; freezes the mask")
    optimize.add_argument("--joint-emission", action="store_true",
                          help="Fit per-triangle emission instead of the "
                          "mask")
    _add_config_flags(optimize, "optim", OptimConfig)
    optimize.set_defaults(handler=_cmd_optimize)

    extract = commands.add_parser("extract", help="Extract emitters")
    extract.add_argument("scene")
    extract.add_argument("fields", help="Fields checkpoint")
    extract.add_argument("output", help="Output folder")
    extract.add_argument("--environment-resolution", type=int)
    extract.add_argument("--joint-threshold", type=float, default=0.1)
    extract.add_argument("--seed", type=int, default=0)
    extract.set_defaults(handler=_cmd_extract)

    refine_cmd = commands.add_parser("refine",
                                     help="Refine shadings by path growth")
    refine_cmd.add_argument("scene")
    refine_cmd.add_argument("cache")
    refine_cmd.add_argument("fields")
    refine_cmd.add_argument("emitters", help="emitters.json")
    refine_cmd.add_argument("output", help="Output shading folder")
    _add_config_flags(refine_cmd, "bake", BakeConfig)
    refine_cmd.set_defaults(handler=_cmd_refine)

    run_cmd = commands.add_parser("run", help="Run the full pipeline")
    run_cmd.add_argument("config", nargs="?",
                         help="PipelineConfig JSON file")
    run_cmd.add_argument("--scene")
    run_cmd.add_argument("--output")
    run_cmd.add_argument("--rounds", type=int)
    run_cmd.add_argument("--seed", type=int)
    run_cmd.add_argument("--workers", type=int)
    run_cmd.add_argument("--joint-emission", action="store_true")
    run_cmd.add_argument("--skip-stage3", action="store_true")
    run_cmd.add_argument("--no-radiance-cache", action="store_true")
    run_cmd.add_argument("--reextract", action="store_true")
    _add_config_flags(run_cmd, "bake", BakeConfig)
    _add_config_flags(run_cmd, "optim", OptimConfig)
    run_cmd.set_defaults(handler=_cmd_run)

    resume_cmd = commands.add_parser("resume", help="Resume a run")
    resume_cmd.add_argument("run_dir")
    resume_cmd.add_argument("--from-stage", required=True,
                            choices=[str(s).lower() for s in STAGES])
    resume_cmd.add_argument("--seed", type=int)
    resume_cmd.add_argument("--force", action="store_true")
    resume_cmd.set_defaults(handler=_cmd_resume)

    render = commands.add_parser("render", help="Render views")
    render.add_argument("scene")
    render.add_argument("fields")
    render.add_argument("emitters", help="emitters.json")
    render.add_argument("output", help="Output folder")
    render.add_argument("--view", type=int, action="append",
                        help="View index, repeatable; default all")
    render.add_argument("--relight", help="Replacement emitters.json")
    render.add_argument("--spp", type=int, default=1024)
    render.add_argument("--seed", type=int, default=0)
    render.add_argument("--workers", type=int, default=1)
    render.set_defaults(handler=_cmd_render)

    evaluate = commands.add_parser("eval", help="Evaluate a run")
    evaluate.add_argument("scene")
    evaluate.add_argument("run_dir")
    evaluate.add_argument("gt", help="Ground-truth folder of the dataset")
    evaluate.add_argument("--output", help="Report JSON file")
    evaluate.add_argument("--spp", type=int, default=256)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.add_argument("--workers", type=int, default=1)
    evaluate.add_argument("--no-render", action="store_true")
    evaluate.set_defaults(handler=_cmd_eval)
    return parser


def _configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    logging.captureWarnings(True)


def main(argv=None):
    """
    Entry point of the ``fipt`` command.

    Returns
    -------
    int
        The exit code.

    """
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        args.handler(args)
    except StageError as error:
        logger.error("%s", error)
        return EXIT_STAGE
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as error:
        logger.error("%s", error)
        return EXIT_CONFIG
    except Exception as error:
        logger.exception("%s", error)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
