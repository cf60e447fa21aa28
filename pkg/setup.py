"""Build the optional Cython kernel core.

The package imports and runs without it (see ``movfnet._backend``); a failed
compile only costs speed.
"""

import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    cythonize = None

extensions = []
if cythonize is not None and not os.environ.get("MOVFNET_NO_EXT"):
    extra = ["-O3"] if sys.platform != "win32" else ["/O2"]
    extensions = cythonize(
        [
            Extension(
                "movfnet._core",
                sources=["src/movfnet/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=extra,
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
            "language_level": "3",
        },
    )

setup(ext_modules=extensions)
