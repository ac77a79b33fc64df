"""Kernel backend selection.

Every hot numeric kernel (dense layers, the monotonic mixing step, Adam)
exists twice: a numba-compiled version in ``kernels_numba`` and a pure
numpy version in ``kernels_numpy`` with identical signatures.  The
``S2QLAB_BACKEND`` environment variable selects one:

    S2QLAB_BACKEND=numpy   force the pure-numpy path
    S2QLAB_BACKEND=numba   force the compiled path (error if numba missing)

Unset, the compiled path is used when numba imports cleanly.  The choice
is resolved once per process, at first use.
"""

import os

ACT_IDENTITY = 0
ACT_RELU = 1
ACT_ELU = 2
ACT_TANH = 3

ACTIVATION_IDS = {
    "identity": ACT_IDENTITY,
    "relu": ACT_RELU,
    "elu": ACT_ELU,
    "tanh": ACT_TANH,
}

_kernels = None
_name = None


def _resolve():
    global _kernels, _name
    choice = os.environ.get("S2QLAB_BACKEND", "").strip().lower()
    if choice not in ("", "numpy", "numba"):
        raise ValueError(f"S2QLAB_BACKEND must be 'numpy' or 'numba', got {choice!r}")
    if choice == "numpy":
        from s2qlab import kernels_numpy as mod
        _kernels, _name = mod, "numpy"
        return
    try:
        from s2qlab import kernels_numba as mod
        _kernels, _name = mod, "numba"
    except ImportError:
        if choice == "numba":
            raise
        from s2qlab import kernels_numpy as mod
        _kernels, _name = mod, "numpy"


def kernels():
    if _kernels is None:
        _resolve()
    return _kernels


def backend_name() -> str:
    if _name is None:
        _resolve()
    return _name
