import os

from setuptools import Extension, setup

extensions = []
if not os.environ.get("CTNVESSEL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "ctnvessel.metrics._thinning",
                    ["src/ctnvessel/metrics/_thinning.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython/numpy at build time: the pure-Python thinning backend is used
        extensions = []

setup(ext_modules=extensions)
