"""Optional compiled kernel; the package falls back to pure Python when it is absent."""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("WITTEN_LAB_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("witten_lab._kernels", ["src/witten_lab/_kernels.pyx"], include_dirs=[numpy.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
