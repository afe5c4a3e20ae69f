"""
This init file is required to guarantee that unittest can import the
folder as a package to discover the tests.

"""
