import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# The compiled kernels are an optimization, not a requirement: firesense.kernels
# falls back to the numpy implementation when the extension is missing.
extensions = [
    Extension(
        "firesense._ckernels",
        ["src/firesense/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
