"""Build the optional compiled branch unit.

The package works without it; ``branchshadow.uarch`` falls back to the
pure-Python kernel when the extension cannot be imported.
"""
from setuptools import setup

try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("branchshadow._kernels", ["src/branchshadow/_kernels.pyx"],
                   extra_compile_args=["-O3"], optional=True)],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
