"""Select the GRU kernel backend at import time.

The compiled extension is used when it was built; setting
``TELAD_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _gru_py

try:
    if os.environ.get("TELAD_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _gru_ext
except ImportError:
    _gru_ext = None

_BACKENDS = {"python": _gru_py}
if _gru_ext is not None:
    _BACKENDS["cython"] = _gru_ext

BACKEND = "cython" if _gru_ext is not None else "python"


def available():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active backend; returns the previous name."""
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    previous, BACKEND = BACKEND, name
    return previous


def gru_forward(*args, **kwargs):
    return _BACKENDS[BACKEND].gru_forward(*args, **kwargs)


def gru_backward(*args, **kwargs):
    return _BACKENDS[BACKEND].gru_backward(*args, **kwargs)
