"""Build hook for the optional compiled kernels.

The package works without the extension (NumPy fallback). When Cython or a C
compiler is missing the build proceeds without it.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("MOME_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mome.numerics._ckernels",
                    ["src/mome/numerics/_ckernels.pyx"],
                    include_dirs=[np.get_include(), "src/mome/numerics"],
                    extra_compile_args=["-O3", "-march=native", "-ffast-math", "-fno-finite-math-only"],
                    extra_link_args=["-lmvec"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
