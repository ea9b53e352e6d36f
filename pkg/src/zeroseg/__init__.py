"""Language-driven zero-shot semantic segmentation, desk scale.

A verified-gradient tensor core, routed window attention, a text-conditioned
decoder, prompt tuning over frozen toy encoders, and a synthetic
compositional benchmark with a generalized zero-shot evaluation protocol.
"""

from .tensor import (
    F32,
    F64,
    GradientTape,
    NumericError,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    gradient_check,
    seeded_rng,
)

__all__ = [
    "F32",
    "F64",
    "GradientTape",
    "NumericError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "backward",
    "gradient_check",
    "seeded_rng",
]
