import numpy as np
import scipy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "ddpnet._ckernels",
        ["src/ddpnet/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        include_path=[scipy.__path__[0] + "/.."],
        compiler_directives={"language_level": "3"},
    )
)
