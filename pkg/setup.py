"""Build script for the optional compiled kernel extension.

The package works without the extension (a pure-numpy backend is selected at
import time), so a failed compile downgrades to a warning instead of aborting
the install.  Set FLUIDSEG_NO_EXT=1 to skip the extension build entirely.
"""

import os
import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Try to build the extension; fall back to pure Python on failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"compiled kernels unavailable, using numpy backend: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"failed to build {ext.name}, using numpy backend: {exc}")


def extensions():
    if os.environ.get("FLUIDSEG_NO_EXT") == "1":
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "fluidseg._kernels._convkernels",
        sources=["src/fluidseg/_kernels/_convkernels.pyx"],
        extra_compile_args=['-O3', '-march=native', '-mprefer-vector-width=256', '-funroll-loops'],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
