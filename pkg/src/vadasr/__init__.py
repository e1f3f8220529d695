"""Streaming voice-activity detection and CTC speech recognition.

A small multi-task model (shared encoder, VAD branch, cross-task attention,
CTC head) with an online chunk-hopping streamer, prefix beam search, and a
two-stage training recipe — all in plain numpy with an optional compiled
kernel for the CTC forward-backward recursion.
"""

from .errors import (
    DataError,
    DimensionError,
    FormatError,
    InfeasibleTargetError,
    InvalidSpecError,
    LayoutError,
    NumericError,
    UnsupportedFormatError,
    UsageError,
    VadAsrError,
    VocabularyError,
)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DataError",
    "DimensionError",
    "FormatError",
    "InfeasibleTargetError",
    "InvalidSpecError",
    "LayoutError",
    "NumericError",
    "UnsupportedFormatError",
    "UsageError",
    "VadAsrError",
    "VocabularyError",
    "__version__",
]
