"""Build script: compiles the Cython CTC kernel when a toolchain is available.

The extension is optional -- if compilation fails the package still installs
and falls back to the pure-numpy kernel at import time.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, etc.
            print(f"warning: skipping extension build ({exc}); "
                  "pure-python kernels will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to build {ext.name} ({exc}); "
                  "pure-python kernels will be used")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        [
            Extension(
                "vadasr.kernels._ctc_cy",
                ["src/vadasr/kernels/_ctc_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
