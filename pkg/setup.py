"""Build script: compiles the optional kernel extension when Cython is around.

The package is fully functional without the extension (the numpy fallback is
selected at import time), so any build failure here degrades to a pure build
instead of aborting the install.
"""

from setuptools import setup


def extension_modules():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "repref._kernels._core",
        ["src/repref/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    try:
        return cythonize([ext], language_level=3)
    except Exception:
        return []


setup(ext_modules=extension_modules())
