"""Build shim for the optional compiled kernel extension.

The package is pure Python plus one Cython extension (lgc._kernels._core)
holding the hot numerical loops.  The extension is optional: if it cannot
be built the install still succeeds and the package falls back to the
NumPy reference kernels at import time.
"""

from setuptools import setup, Extension

import numpy

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext = Extension(
        "lgc._kernels._core",
        sources=["src/lgc/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
