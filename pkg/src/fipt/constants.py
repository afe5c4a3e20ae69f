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
Collection of constants defined for fipt.

Named constants are derived from a custom type to make comparisons
easier, e.g. when user input such as ``"part"`` from a JSON config is
compared to ``PART``. Numeric constants of the reflectance model and
the estimators are collected here as well, so that they are defined
exactly once.

"""
import numpy as np


class FiptConstant(object):
    """
    A type for named constants.

    Parameters
    ----------
    name : str
        Name of the constant, used for comparisons.

    Attributes
    ----------
    name : str
        Name of the constant, used for comparisons.

    """

    def __init__(self, name):
        self.name = name

    def __str__(self):
        return str(self.name)

    def __repr__(self):
        return "FiptConstant('{}')".format(self.name)

    def __eq__(self, other):
        if not isinstance(other, FiptConstant):
            return str(self.name).upper() == str(other).upper()
        return self.name.upper() == other.name.upper()

    def __ne__(self, other):
        return not self.__eq__(other)

    def __hash__(self):
        return hash(str(self.name).upper())

    def __add__(self, other):
        return str(self.name) + str(other)

    def __radd__(self, other):
        return str(other) + str(self.name)


def as_constant(value, *choices):
    """
    Convert user input to one of the given constants.

    Parameters
    ----------
    value : str or FiptConstant
        The user input, compared case-insensitively.
    *choices : FiptConstant
        The admissible constants.

    Returns
    -------
    FiptConstant
        The matching constant.

    """
    for choice in choices:
        if choice == value:
            return choice

    msg = "Invalid value '{}', expected one of: {}.".format(
        value, ", ".join(str(c) for c in choices))
    raise ValueError(msg)


# Byte order of binary artifacts, which are always little-endian
FILE_BYTE_ORDER_CHAR = "<"

# Segmentation grouping for the roughness-metallic propagation loss
PART = FiptConstant("PART")
SEMANTIC = FiptConstant("SEMANTIC")

# Pipeline stages in execution order
CACHE = FiptConstant("CACHE")
BAKE = FiptConstant("BAKE")
OPTIMIZE = FiptConstant("OPTIMIZE")
EXTRACT = FiptConstant("EXTRACT")
REFINE = FiptConstant("REFINE")
STAGES = (CACHE, BAKE, OPTIMIZE, EXTRACT, REFINE)

# BRDF field encodings
HASH = FiptConstant("HASH")
FREQUENCY = FiptConstant("FREQUENCY")

# Reflectance model
SIGMA_MIN = 0.01
DIELECTRIC_F0 = 0.04
ROUGHNESS_LEVELS = np.linspace(0.0, 1.0, 6)
LUMINANCE_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

# Roughness above which a surface terminates refinement paths
DIFFUSE_THRESHOLD = 0.6

# Tone mapping used by losses; the metric curve is a plain gamma
TONEMAP = "reinhard_srgb"
METRIC_GAMMA = 1.0 / 2.2

# Metrics
PSNR_CAP = 99.0

# Emitter extraction
EMITTER_SAMPLES_PER_TRIANGLE = 100
EMITTER_ALPHA_THRESHOLD = 0.01
