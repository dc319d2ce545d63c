"""In-place replicated registers: write-once, consensus-sequence, and
atomic read-modify-write, with a deterministic fault-injecting simulator,
safety checkers, and a replicated key-value facade."""

from .core import (
    EMPTY,
    Config,
    Mode,
    ReqID,
    Round,
    ROUND_ZERO,
    UpdateCommand,
    Value,
)
from .messages import ReqKind, Status

__all__ = [
    "EMPTY",
    "Config",
    "Mode",
    "ReqID",
    "ReqKind",
    "Round",
    "ROUND_ZERO",
    "Status",
    "UpdateCommand",
    "Value",
]

__version__ = "0.1.0"
