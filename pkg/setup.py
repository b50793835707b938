import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "hdrpanel._kernels",
                ["src/hdrpanel/_kernels.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython: install pure-python only; hdrpanel._backend falls back.
    extensions = []

setup(ext_modules=extensions)
