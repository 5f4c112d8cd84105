"""Kernel backend selection.

The compiled extension is preferred when importable; otherwise the
pure-Python fallback is used. ``CDUQ_BACKEND=c`` or ``CDUQ_BACKEND=python``
forces a choice (forcing ``c`` when the extension is missing is an error,
silently degrading would hide a broken build).

Both backends implement the same functions over flat float64 buffers and
are required to agree bit for bit; ``get_backend(name)`` exposes each one
for parity tests and benchmarks.
"""

import os

from . import _pykernels


def _load_compiled():
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def get_backend(name):
    """Return a specific backend module: "c" or "python"."""
    if name == "python":
        return _pykernels
    if name == "c":
        compiled = _load_compiled()
        if compiled is None:
            raise ImportError("compiled kernel extension is not available")
        return compiled
    raise ValueError(f"unknown backend {name!r}")


def _select():
    forced = os.environ.get("CDUQ_BACKEND")
    if forced:
        return get_backend(forced)
    compiled = _load_compiled()
    return compiled if compiled is not None else _pykernels


_impl = _select()

BACKEND_NAME = _impl.BACKEND_NAME

u64_at = _impl.u64_at
unit_at = _impl.unit_at
fill_uniform = _impl.fill_uniform
fill_gaussian = _impl.fill_gaussian
matmul = _impl.matmul
transpose = _impl.transpose
colsum = _impl.colsum
vgather = _impl.vgather
vscatter_add = _impl.vscatter_add
vadd = _impl.vadd
vsub = _impl.vsub
vmul = _impl.vmul
vscale = _impl.vscale
vsum = _impl.vsum
vsigmoid = _impl.vsigmoid
vsigmoid_bwd = _impl.vsigmoid_bwd
vrelu = _impl.vrelu
vrelu_bwd = _impl.vrelu_bwd
dropout_from_uniform = _impl.dropout_from_uniform
adam_update = _impl.adam_update
all_finite = _impl.all_finite
