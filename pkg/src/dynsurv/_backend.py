"""Kernel backend selection.

The compiled extension is used when it imports cleanly, unless the
``DYNSURV_BACKEND`` environment variable is set to ``python``. Setting it to
``compiled`` makes a missing extension an error instead of a silent fallback.
"""

import os

from dynsurv import _pykernels

_requested = os.environ.get("DYNSURV_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "compiled"):
    raise ImportError(f"DYNSURV_BACKEND must be auto, python or compiled, got {_requested!r}")

kernels = _pykernels
BACKEND = "python"
if _requested != "python":
    try:
        from dynsurv import _ckernels
    except ImportError:
        if _requested == "compiled":
            raise
    else:
        kernels = _ckernels
        BACKEND = "compiled"


def get_kernels(name=None):
    """Return a kernel module: the active one, or ``"python"``/``"compiled"``."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "compiled":
        from dynsurv import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
