"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (numpy fallback is selected at
import time), so the build is marked optional and a failed compile only
produces a warning.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "kaf_oneshot._kernels._fast",
                ["src/kaf_oneshot/_kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
