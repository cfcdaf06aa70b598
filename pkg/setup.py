import os

from setuptools import Extension, setup

try:
    import pybind11

    include_dirs = [pybind11.get_include(), "/usr/include/x86_64-linux-gnu"]
    ext_modules = [
        Extension(
            "scrapscan._attn_native",
            sources=[os.path.join("src", "scrapscan", "_attention.cpp")],
            include_dirs=include_dirs,
            libraries=["openblas"],
            extra_compile_args=[
                "-O3",
                "-march=native",
                "-mprefer-vector-width=512",
                "-ffast-math",
                "-std=c++17",
            ],
            optional=True,  # pure-python fallback exists; a failed build must not block install
        )
    ]
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
