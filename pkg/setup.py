"""Build script for the optional compiled kernels.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed compile should not make the install unusable.
Set NOISELUR_SKIP_EXT=1 to skip the extension on purpose.

-ffp-contract=off matters: the fallback and the compiled kernels promise
bit-identical results, and fused multiply-adds would silently break that.
"""
import os
import sys

from setuptools import setup
from setuptools.extension import Extension


def _extensions():
    if os.environ.get("NOISELUR_SKIP_EXT") == "1":
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        print("noiselur: Cython/NumPy unavailable at build time, "
              "skipping compiled kernels", file=sys.stderr)
        return []
    ext = Extension(
        "noiselur._core._kernels",
        sources=["src/noiselur/_core/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], language_level="3")


setup(ext_modules=_extensions())
