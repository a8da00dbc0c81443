"""Path shim: `src` and the test helpers import the same way whether a suite
runs as a script or under pytest."""
import os
import sys

TESTS_DIR = os.path.dirname(os.path.abspath(__file__))
PROJECT_ROOT = os.path.dirname(TESTS_DIR)

for path in (TESTS_DIR, PROJECT_ROOT):
    if path not in sys.path:
        sys.path.insert(0, path)
