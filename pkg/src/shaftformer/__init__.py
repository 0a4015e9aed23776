"""Transformer forecasters for railway-axle vibration signals.

Two model variants are provided: a time-domain forecaster (``SF``) built on
ProbSparse self-attention with convolutional distilling, and a spectral
forecaster (``SSF``) that works on STFT frames with HiLo attention, global
frequency filtering and an exponential-variance sampling head.
"""

from shaftformer.errors import (
    ConfigMismatch,
    DivergenceDetected,
    InsufficientContext,
    InvalidArgument,
    InvalidConfig,
    InvariantViolation,
    ParseError,
    ShaftFormerError,
    ShapeMismatch,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigMismatch",
    "DivergenceDetected",
    "InsufficientContext",
    "InvalidArgument",
    "InvalidConfig",
    "InvariantViolation",
    "ParseError",
    "ShaftFormerError",
    "ShapeMismatch",
]
