"""Build script: compiles the optional C kernel extension.

The package works without the extension (a pure-Python kernel module is
selected at import time); building it makes training 1-2 orders of
magnitude faster.  Set FEDCAST_SKIP_EXT=1 to force a pure-Python install.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("FEDCAST_SKIP_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext = Extension("fedcast._ckernels", ["src/fedcast/_ckernels.pyx"])
        ext.optional = True  # failed compile degrades to the fallback
        ext_modules = cythonize([ext], language_level="3")
    except ImportError:
        pass

setup(ext_modules=ext_modules)
