"""Builds the optional Cython kernels; the package works without them."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("COSMOS_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "cosmosfl._ckernels",
                    ["src/cosmosfl/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
