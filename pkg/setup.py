import sys

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the speedup extension if possible; the package runs without it."""

    def run(self):
        try:
            super().run()
        except Exception as e:  # missing compiler / unsupported flags
            print(f"warning: building deidseq.kernels._fast failed ({e}); "
                  "falling back to the pure-numpy kernels", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as e:
            print(f"warning: building {ext.name} failed ({e}); "
                  "falling back to the pure-numpy kernels", file=sys.stderr)


try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "deidseq.kernels._fast",
                ["src/deidseq/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_24_API_VERSION")],
                # -ffast-math/-march=native let gcc vectorize the exp/tanh
                # gate loops (libmvec); the kernels never rely on NaN/inf.
                extra_compile_args=["-O3", "-march=native", "-ffast-math"],
                libraries=["mvec", "m"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
