"""Backend selection for the scoring kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``ACTIVEDET_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

python = _pykernels
cython = None

if not os.environ.get("ACTIVEDET_PURE_PYTHON"):
    try:
        from . import _ckernels as cython
    except ImportError:
        cython = None

active = cython if cython is not None else python
BACKEND = active.BACKEND

entropy = active.entropy
box_mean = active.box_mean
proposed_branch = active.proposed_branch


def available():
    """All importable backends, compiled first."""
    return [m for m in (cython, python) if m is not None]
