"""Hot loops of the package, compiled when possible.

The Cython extension ``_ckernels`` is used when it was built; otherwise the
numpy versions in ``_pykernels`` take over.  Set ``PHASEMATCH_PURE_PYTHON=1``
to force the fallback.  Both produce identical arrays.
"""
import os

from . import _pykernels as python

native = None
if os.environ.get("PHASEMATCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as native
    except ImportError:  # extension not built
        native = None

_impl = native if native is not None else python
BACKEND = "cython" if native is not None else "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
nms_strict = _impl.nms_strict

__all__ = [
    "BACKEND", "native", "python",
    "im2col", "col2im", "maxpool2_forward", "maxpool2_backward", "nms_strict",
]
