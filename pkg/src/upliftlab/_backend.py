"""Pick the compiled kernels when they were built, else the Python ones.

Set ``UPLIFTLAB_PURE_PYTHON=1`` to force the fallback.
"""
import os

if os.environ.get("UPLIFTLAB_PURE_PYTHON") == "1":
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        from . import _kernels_py as kernels

COMPILED = kernels.__name__.endswith("._kernels")

upgrade_chains = kernels.upgrade_chains
ras_sweep = kernels.ras_sweep
