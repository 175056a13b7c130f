"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built and imports cleanly.
Set ``NSYNC_PURE_PYTHON=1`` to force the numpy implementation.
"""

import os

from nsync._kernels import _pykernels

if os.environ.get("NSYNC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from nsync._kernels import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
mlp_forward = _impl.mlp_forward
mlp_loss_grad = _impl.mlp_loss_grad

__all__ = ["BACKEND", "mlp_forward", "mlp_loss_grad"]
