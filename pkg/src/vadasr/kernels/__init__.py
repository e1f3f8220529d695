"""Hot-kernel dispatch: compiled Cython extension when available, pure-numpy
fallback otherwise. Set VADASR_PURE_PYTHON=1 to force the fallback."""

import os

from . import _ctc_py

if os.environ.get("VADASR_PURE_PYTHON"):
    ctc_forward_backward = _ctc_py.ctc_forward_backward
    BACKEND = "python"
else:
    try:
        from ._ctc_cy import ctc_forward_backward  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        ctc_forward_backward = _ctc_py.ctc_forward_backward
        BACKEND = "python"

extend_with_blanks = _ctc_py.extend_with_blanks

__all__ = ["ctc_forward_backward", "extend_with_blanks", "BACKEND"]
