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
Recover materials and emitters of indoor scenes from posed HDR images.

"""

from fipt.scene import Scene as Scene
from fipt.scene import load_scene as load_scene
from fipt.scene import save_scene as save_scene
from fipt.geometry import build_bvh as build_bvh
from fipt.radiancecache import RadianceCache as RadianceCache
from fipt.shading import ShadingBuffers as ShadingBuffers
from fipt.fields import BrdfField as BrdfField
from fipt.fields import EmissionMaskField as EmissionMaskField
from fipt.fields import SceneFields as SceneFields
from fipt.emitter import EmitterSet as EmitterSet
from fipt.emitter import load_emitters as load_emitters
from fipt.pipeline import PipelineConfig as PipelineConfig
from fipt.pipeline import run as run
from fipt.pipeline import resume as resume
