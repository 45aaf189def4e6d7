"""Build script for the optional compiled kernel extension.

The package is fully functional without it (a pure-numpy backend is
selected at import when the extension is absent). To build in place:

    python setup.py build_ext --inplace
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "qfc.kernels._cykernels",
                sources=["src/qfc/kernels/_cykernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
