from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback is selected at import time
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("ftz._kernels", ["src/ftz/_kernels.pyx"], extra_compile_args=["-O3", "-ffast-math", "-march=native"], libraries=["mvec", "m"])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
