"""Hot-loop kernels.

The compiled extension is used when it was built; otherwise the numpy
versions in :mod:`._pykernels` are used. Set ``PANELNET_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("PANELNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
fold_columns = _impl.fold_columns

__all__ = ["BACKEND", "im2col", "col2im", "fold_columns"]
