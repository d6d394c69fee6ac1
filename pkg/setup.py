"""Build script: compiles the optional Cython kernels.

If Cython or a C compiler is missing the package still installs and the
numpy fallback in ``roughspde._kernels_py`` is used at import time.
"""

import os

import numpy as np
from setuptools import setup

ext_modules = []
if os.environ.get("ROUGHSPDE_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "roughspde._kernels",
                    ["src/roughspde/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
