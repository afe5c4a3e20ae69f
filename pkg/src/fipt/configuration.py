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
Shared behaviour of the configuration dataclasses.

"""
import dataclasses


class ConfigMixin(object):
    """Dictionary conversion for dataclass configs."""

    def to_dict(self):
        """Return the options as a plain dictionary."""
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        """
        Create a config from a dictionary.

        Raises
        ------
        ValueError
            If ``values`` holds keys that are no option of the config.

        """
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            msg = "Unknown {} option(s): {}.".format(cls.__name__,
                                                     ", ".join(unknown))
            raise ValueError(msg)
        return cls(**values)

    @classmethod
    def option_names(cls):
        """Names of all options in declaration order."""
        return [f.name for f in dataclasses.fields(cls)]
