"""Build the optional Cython kernels; the package falls back to NumPy without them."""

import os
import platform

from setuptools import setup

ext_modules = []
if os.environ.get("BNNC_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # build tools missing: install the pure-Python package
        pass
    else:
        x86 = platform.machine().lower() in ("x86_64", "amd64")
        ext_modules = cythonize(
            [Extension("bnnc.kernels._ckernels", ["src/bnnc/kernels/_ckernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"] + (["-mpopcnt"] if x86 else []),
                       optional=True,
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
