"""
Tests for the named constants.

"""
import unittest

from fipt.constants import (BAKE, PART, SEMANTIC, STAGES, FiptConstant,
                            as_constant)


class TestFiptConstant(unittest.TestCase):
    """Tests for comparisons with user input."""

    def test_case_insensitive(self):
        """Constants equal strings and constants of any case."""
        assert PART == "part"
        assert PART == FiptConstant("Part")
        assert PART != SEMANTIC
        assert hash(PART) == hash(FiptConstant("part"))

    def test_string_concatenation(self):
        """Constants concatenate like their names."""
        assert "stage_" + BAKE == "stage_BAKE"
        assert BAKE + ".json" == "BAKE.json"

    def test_as_constant(self):
        """User input maps onto the admissible constants."""
        assert as_constant("bake", *STAGES) is BAKE
        with self.assertRaises(ValueError):
            as_constant("render", *STAGES)
