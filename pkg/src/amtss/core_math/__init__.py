"""Float64 numpy kernel: primitives with explicit backward passes, layers, AdamW."""

from amtss.core_math.gradcheck import finite_difference_grad, relative_error
from amtss.core_math.ops import (
    PROB_FLOOR,
    cross_entropy,
    kl_divergence,
    log_softmax,
    matmul,
    softmax,
)
from amtss.core_math.optim import AdamW, AdamWState, Parameter, adamw_step

__all__ = [
    "PROB_FLOOR",
    "AdamW",
    "AdamWState",
    "Parameter",
    "adamw_step",
    "cross_entropy",
    "finite_difference_grad",
    "kl_divergence",
    "log_softmax",
    "matmul",
    "relative_error",
    "softmax",
]
