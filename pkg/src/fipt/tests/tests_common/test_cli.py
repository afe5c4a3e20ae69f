"""
Tests for the command line interface.

"""
import os
import shutil
import tempfile
import unittest

from fipt import cli
from fipt.optimization import OptimConfig
from fipt.radiancecache import RadianceCache
from fipt.scene import save_scene
from fipt.shading import BakeConfig
from fipt.tests.tests_common.fixtures import get_test_scene


class TestParser(unittest.TestCase):
    """Tests for the generated config flags."""

    def setUp(self):
        self.parser = cli.build_parser()

    def test_config_flags(self):
        """Every config option gets a typed flag."""
        args = self.parser.parse_args(
            ["run", "--bake-spp-diffuse", "16", "--bake-denoise", "no",
             "--optim-lr", "0.01", "--optim-grouping", "semantic"])

        bake = cli._apply_overrides(BakeConfig(), args, "bake")
        optim = cli._apply_overrides(OptimConfig(), args, "optim")

        assert bake.spp_diffuse == 16 and bake.denoise is False
        assert bake.spp_specular == BakeConfig().spp_specular
        assert optim.lr == 0.01
        assert optim.lambda_propagation == 1e-3

    def test_bad_boolean(self):
        """Unparsable booleans are rejected by the parser."""
        with self.assertRaises(SystemExit):
            self.parser.parse_args(["run", "--bake-mis", "maybe"])

    def test_resume_stages(self):
        """resume only accepts pipeline stages."""
        args = self.parser.parse_args(["resume", "out", "--from-stage",
                                       "refine"])

        assert args.from_stage == "refine"
        with self.assertRaises(SystemExit):
            self.parser.parse_args(["resume", "out", "--from-stage",
                                    "render"])


class TestMain(unittest.TestCase):
    """Tests for commands and exit codes."""

    def setUp(self):
        self.folder = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.folder, ignore_errors=True)

    def test_missing_scene(self):
        """A missing input file is a configuration error."""
        code = cli.main(["-q", "cache",
                         os.path.join(self.folder, "scene.json"),
                         os.path.join(self.folder, "cache.bin")])

        assert code == cli.EXIT_CONFIG

    def test_run_without_scene(self):
        """fipt run needs an existing scene descriptor."""
        code = cli.main(["-q", "run", "--scene",
                         os.path.join(self.folder, "scene.json"),
                         "--output", os.path.join(self.folder, "run")])

        assert code == cli.EXIT_CONFIG

    def test_invalid_override(self):
        """Overrides that break a config are configuration errors."""
        code = cli.main(["-q", "run", "--scene", "x.json", "--rounds", "0"])

        assert code == cli.EXIT_CONFIG

    def test_resume_without_run(self):
        """Resuming an empty folder fails with a configuration error."""
        code = cli.main(["-q", "resume", self.folder, "--from-stage",
                         "bake"])

        assert code == cli.EXIT_CONFIG

    def test_cache_command(self):
        """fipt cache writes a loadable radiance cache."""
        scene_file = save_scene(get_test_scene(),
                                os.path.join(self.folder, "scene"))
        output = os.path.join(self.folder, "cache.bin")

        code = cli.main(["-q", "cache", scene_file, output,
                         "--resolution", "8"])

        assert code == cli.EXIT_OK
        assert RadianceCache.load(output).resolution == 8
