"""Proposal-free instance segmentation at toy scale.

Setting ``PFN_THREADS`` before the first import caps the worker threads of the
BLAS backend used by numpy.
"""

import os as _os

__version__ = "0.1.0"


def _apply_thread_cap() -> None:
    raw = _os.environ.get("PFN_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        return
    if n < 1:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(var, str(n))


_apply_thread_cap()
