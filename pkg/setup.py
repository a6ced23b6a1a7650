import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    # The compiled scan kernel is optional: retrieval falls back to the
    # vectorized numpy implementation when the extension is unavailable.
    extensions = cythonize(
        [
            Extension(
                "featfill._scan_cy",
                ["src/featfill/_scan_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    extensions = []

setup(ext_modules=extensions)
