"""Build script: compiles the sparse LDL^T kernel used by the interior-point
solver.  The extension is optional; if Cython or a C compiler is missing the
package falls back to a SciPy-based factorization selected at import time."""

import numpy as np
from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, otherwise warn and continue."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - compiler-dependent
            print(f"warning: compiled kernel skipped ({exc}); "
                  "using the pure-Python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - compiler-dependent
            print(f"warning: compiled kernel skipped ({exc}); "
                  "using the pure-Python fallback")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover
        return []
    return cythonize(
        ["src/gridshield/solver/_ldl_kernel.pyx"],
        compiler_directives={"language_level": "3",
                             "boundscheck": False,
                             "wraparound": False,
                             "cdivision": True},
    )


setup(
    ext_modules=extensions(),
    include_dirs=[np.get_include()],
    cmdclass={"build_ext": OptionalBuildExt},
)
