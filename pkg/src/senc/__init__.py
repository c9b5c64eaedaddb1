"""Nucleus classification from instance maps with contour-aware graph networks."""

import os

# Single-threaded BLAS keeps training bitwise reproducible.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, os.environ.get("SENC_THREADS", "1"))

__version__ = "0.1.0"
