"""Create a package for functional tests.

The tests in this package exercise the `cunet` command line end to end, training small models on synthetic data. They
can be bigger and slower than unit tests. It is more acceptable to use `subprocess` calls here to confirm behavior.
"""
