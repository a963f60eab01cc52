"""Hot numeric kernels with selectable backend.

Two interchangeable implementations exist: numba ``@njit`` loops
(``_numba_impl``) and pure numpy (``_numpy_impl``). The active backend is
chosen at import time from the ``REINA_LAB_BACKEND`` environment variable
(``numba``, ``numpy``, or ``auto``; default ``auto`` prefers numba when it
imports cleanly) and can be switched programmatically with
:func:`select_backend`.

Both backends are deterministic run-to-run. Outputs agree to float64
round-off but are not guaranteed bit-identical to each other; pipelines are
reproducible within a fixed backend.
"""

from __future__ import annotations

import os

from . import _numpy_impl

_KERNEL_NAMES = [
    "linear2d",
    "log_softmax_fwd",
    "log_softmax_bwd",
    "causal_attention_fwd",
    "causal_attention_bwd",
    "cross_attention_fwd",
    "cross_attention_bwd",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "adamw_update",
]

_backend = "numpy"


def _numba_module():
    from . import _numba_impl  # deferred: import triggers jit machinery

    return _numba_impl


def select_backend(name: str) -> str:
    """Bind the module-level kernel functions to the named backend."""
    global _backend
    if name == "auto":
        try:
            impl = _numba_module()
            name = "numba"
        except ImportError:
            impl = _numpy_impl
            name = "numpy"
    elif name == "numba":
        impl = _numba_module()
    elif name == "numpy":
        impl = _numpy_impl
    else:
        raise ValueError(f"unknown kernel backend: {name!r}")
    g = globals()
    for fn in _KERNEL_NAMES:
        g[fn] = getattr(impl, fn)
    _backend = name
    return name


def backend_name() -> str:
    return _backend


select_backend(os.environ.get("REINA_LAB_BACKEND", "auto"))
