"""Kernel backend selection.

The compiled extension is used when it imports; set ``FEDRN_KERNELS=python``
to force the numpy implementation.
"""

import os
import warnings

from . import _pykernels

BACKENDS = {"python": _pykernels}

try:
    from . import _ckernels
except ImportError:
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

_requested = os.environ.get("FEDRN_KERNELS", "").strip().lower()
if _requested == "python":
    kernels = _pykernels
elif _requested in ("", "cython", "auto"):
    if _ckernels is None and _requested == "cython":
        warnings.warn("FEDRN_KERNELS=cython but the extension is not built; using numpy kernels")
    kernels = _ckernels if _ckernels is not None else _pykernels
else:
    raise ImportError(f"unknown FEDRN_KERNELS value {_requested!r}")

COMPILED = kernels is not _pykernels


def use(name):
    """Switch the active backend (``"python"`` or ``"cython"``) for this process."""
    global kernels, COMPILED
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {sorted(BACKENDS)}")
    kernels = BACKENDS[name]
    COMPILED = kernels is not _pykernels
