"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
implementations take over. Set ``MORPHFLOW_PURE_PYTHON=1`` to force the
fallback (the benchmark and the backend-parity tests rely on this switch).
"""
import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("MORPHFLOW_PURE_PYTHON", "") in ("", "0"):
    _active = compiled_backend
else:
    _active = python_backend

BACKEND = _active.BACKEND
render_forward = _active.render_forward
render_backward = _active.render_backward
splat_scalar = _active.splat_scalar
splat_vector = _active.splat_vector
softmin = _active.softmin
adam_step = _active.adam_step


def available_backends():
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
