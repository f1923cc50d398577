"""Backend selection for the per-pixel kernels.

The compiled extension is used when it was built and ``TASKOBS_PURE`` is not
set; otherwise the numpy implementation is used. Both produce identical bytes.
"""

import os

from taskobs import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TASKOBS_PURE", "") not in ("1", "true", "yes"):
    try:
        from taskobs import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

normalize_depth = _impl.normalize_depth
repaint = _impl.repaint
fuse = _impl.fuse
canonicalize = _impl.canonicalize
patch_pool_u8 = _impl.patch_pool_u8


def backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    found = {"python": _pykernels}
    try:
        from taskobs import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
