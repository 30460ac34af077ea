"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time: numba when importable, unless the
environment variable ``LANDSCAPE_NO_NUMBA`` is set to a truthy value, in which
case the numpy twin is used. Both backends implement the same flat-parameter
interface and agree to floating-point roundoff.

Parameter layout: the weight stack is flattened layer by layer (layer 1
first), row-major within each layer. ``widths`` is the int64 vector
(d_0, ..., d_H).
"""

from __future__ import annotations

import os

import numpy as np

STATUS_CONVERGED = 0
STATUS_EXHAUSTED = 1
STATUS_UNDERFLOW = 2
STATUS_DIVERGED = 3


def env_requests_numpy(environ=os.environ) -> bool:
    """True when LANDSCAPE_NO_NUMBA asks for the pure-numpy path."""
    return environ.get("LANDSCAPE_NO_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


if env_requests_numpy():
    from . import numpy_backend as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        from . import numpy_backend as _impl

        BACKEND = "numpy"


product_flat = _impl.product_flat
loss_flat = _impl.loss_flat
grad_flat = _impl.grad_flat
gd_chunk = _impl.gd_chunk
masked_loss_flat = _impl.masked_loss_flat
masked_grad_flat = _impl.masked_grad_flat
masked_gd_chunk = _impl.masked_gd_chunk


def widths_array(widths) -> np.ndarray:
    return np.asarray(widths, dtype=np.int64)


def pack_layers(layers) -> np.ndarray:
    """Flatten layers into one parameter vector (layer-major, row-major)."""
    return np.concatenate([np.ascontiguousarray(W, dtype=np.float64).ravel() for W in layers])


def unpack_theta(theta: np.ndarray, widths: np.ndarray) -> list[np.ndarray]:
    """Split a parameter vector back into per-layer matrices (copies)."""
    out = []
    off = 0
    for i in range(len(widths) - 1):
        r, c = int(widths[i + 1]), int(widths[i])
        out.append(theta[off:off + r * c].reshape(r, c).copy())
        off += r * c
    return out
