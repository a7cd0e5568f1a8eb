"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
reference versions are used. ``SLAHAN_BACKEND=python`` forces the fallback,
``SLAHAN_BACKEND=compiled`` makes a missing extension an import error.
"""

import os

from . import _kernels_py

_FUNCS = (
    "lstm_cell_forward",
    "lstm_cell_backward",
    "lstm_sequence_forward",
    "lstm_sequence_backward",
    "weighted_maxpool_forward",
    "weighted_maxpool_backward",
    "lcs_length",
)


def _load(requested):
    if requested == "python":
        return _kernels_py, "python"
    try:
        from . import _ckernels
    except ImportError:
        if requested == "compiled":
            raise
        return _kernels_py, "python"
    return _ckernels, "compiled"


_module, BACKEND = _load(os.environ.get("SLAHAN_BACKEND", "auto").lower())


def set_backend(name):
    """Switch backend at runtime (``"python"`` or ``"compiled"``); used by benchmarks and tests."""
    global _module, BACKEND
    _module, BACKEND = _load(name)
    for fn in _FUNCS:
        globals()[fn] = getattr(_module, fn)
    return BACKEND


def compiled_available():
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


lstm_cell_forward = _module.lstm_cell_forward
lstm_cell_backward = _module.lstm_cell_backward
lstm_sequence_forward = _module.lstm_sequence_forward
lstm_sequence_backward = _module.lstm_sequence_backward
weighted_maxpool_forward = _module.weighted_maxpool_forward
weighted_maxpool_backward = _module.weighted_maxpool_backward
lcs_length = _module.lcs_length
