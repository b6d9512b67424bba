"""Build hook for the optional compiled kernel core.

The package is fully functional without it (numpy fallback, selected at
import); when Cython and a C compiler are present the extension is built
and picked up automatically.
"""

from setuptools import Extension, setup


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "tinypeft.kernels._fast",
        ["src/tinypeft/kernels/_fast.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions())
