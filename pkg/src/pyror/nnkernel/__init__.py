"""Minimal NCHW tensor engine for executing layer graphs."""

from .engine import (
    ForwardCache,
    GradcheckReport,
    ParamStore,
    StaleCacheError,
    backward,
    forward,
    gradcheck,
    init_params,
)
from .ops import conv_forward, conv_naive, softmax_cross_entropy

__all__ = [
    "ForwardCache", "GradcheckReport", "ParamStore", "StaleCacheError", "backward",
    "conv_forward", "conv_naive", "forward", "gradcheck", "init_params",
    "softmax_cross_entropy",
]
