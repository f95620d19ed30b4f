"""Hierarchical image classification as path prediction in a class tree."""

import os
from importlib import resources

__version__ = "0.1.0"

# HIERPATH_THREADS caps the BLAS/OpenMP worker pools.  The standard variables
# are only read when the numeric libraries first load, so this must run
# before anything imports numpy.
_threads = os.environ.get("HIERPATH_THREADS")
if _threads and _threads.isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del _threads


def bundled_tree_path(name: str):
    """Filesystem path of a tree file shipped with the package."""
    return resources.files(__name__) / "trees" / f"{name}.tree"
