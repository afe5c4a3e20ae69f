"""
Unit tests for fipt.

All tests live in the package ``fipt.tests.tests_common``. To run them,
use the function ``run_python_tests()`` or point ``unittest``/``pytest``
discovery to that folder.

"""
import unittest


def run_python_tests():
    """
    Run all unit tests.

    Test results are exported to a text file ``fipt_test_report.txt`` in
    the current working directory.

    Raises
    ------
    RuntimeError
        If not all tests pass.

    Returns
    -------
    None.

    """
    # discovery is based off the path of the tests module
    from fipt.tests import tests_common

    suite = _find_tests(tests_common)
    _run_tests(suite, "fipt_test_report.txt")


def _find_tests(module):
    """Helper function to build a test suite of all tests in a package."""
    loader = unittest.TestLoader()
    tests_path = module.__path__[0]
    return loader.discover(tests_path, top_level_dir=tests_path)


def _run_tests(suite, file_name):
    """
    Run a suite of tests and generate an output file.

    Parameters
    ----------
    suite : unittest.TestSuite
        All the tests that will be run.
    file_name : str
        Output file name for the test report.

    Returns
    -------
    None.

    """
    print("Starting test run...")

    with open(file_name, "w") as logfile:
        runner = unittest.TextTestRunner(logfile, verbosity=3)
        result = runner.run(suite)

    print("Test run finished.\n   tests run: %d\n   failures: %d\n"
          "   errors: %d" % (result.testsRun, len(result.failures),
                             len(result.errors)))

    if not result.wasSuccessful():
        with open(file_name, "r") as logfile:
            for line in logfile.readlines():
                print(line)

        raise RuntimeError("Not all tests passed.")
