"""Patch-mixing domain adaptation as a three-player min-max game.

A small numpy tape engine (tensor), a tiny vision transformer (model),
per-patch beta mixing (patchmix), attention scoring (attention), the mixed
supervision losses (losses), prototype pseudo-labels (pseudolabel), the
simultaneous-update game loop (game), synthetic two-domain data (data) and a
flat-config CLI (config, cli).
"""

from .tensor import (
    ContractError,
    DegenerateInputError,
    FormatError,
    NumericError,
    SequencingError,
    ShapeError,
    Tape,
    Tensor,
    cosine_similarity,
    cross_entropy,
    finite_diff_grad,
    softmax,
    tape,
)

__all__ = [
    "ContractError",
    "DegenerateInputError",
    "FormatError",
    "NumericError",
    "SequencingError",
    "ShapeError",
    "Tape",
    "Tensor",
    "cosine_similarity",
    "cross_entropy",
    "finite_diff_grad",
    "softmax",
    "tape",
]
