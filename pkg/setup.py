"""Build script for the optional compiled coordinate-descent core.

The package works without the extension (a pure NumPy twin is selected at
import time), so failure to compile is downgraded to a warning rather than
a hard error.
"""

import sys

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    numpy = None
    cythonize = None


def extensions():
    if cythonize is None:
        print("cpkern: Cython/NumPy unavailable at build time; "
              "building without the compiled core", file=sys.stderr)
        return []
    ext = Extension(
        "cpkern._cdcore",
        sources=["src/cpkern/_cdcore.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=extensions())
