"""Stochastic-rounding mixed-precision SGD laboratory."""

from .quant import (
    QuantGrid,
    QuantizationDomainError,
    Rounding,
    RoundingPolicy,
    ThresholdStream,
    lfsr6_next,
    parse_grid,
    quantize,
    rtn,
    sr,
    sr_error_variance,
    sr_matrix,
    threshold_quantize,
)

__version__ = "0.1.0"
