"""Build hook for the optional compiled kernels.

The package works without them; ``robust_mfg._backend`` falls back to numpy.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("ROBUST_MFG_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "robust_mfg._kernels",
                    ["src/robust_mfg/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
