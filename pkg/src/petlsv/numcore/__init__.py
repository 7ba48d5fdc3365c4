"""Numerical substrate: tensors, ops with exact gradients, RNG, checkpoints."""

from petlsv.numcore.checkpoint import load_checkpoint, save_checkpoint
from petlsv.numcore.gradcheck import grad_check
from petlsv.numcore.ops import (
    ACTIVATIONS,
    concat,
    conv1d,
    cosine,
    gelu,
    layer_norm,
    linear,
    relu,
    softmax_rows,
)
from petlsv.numcore.params import ParamGroup, census
from petlsv.numcore.rng import make_rng
from petlsv.numcore.tensor import Tensor, backward, gradients, no_grad

__all__ = [
    "ACTIVATIONS",
    "ParamGroup",
    "Tensor",
    "backward",
    "census",
    "concat",
    "conv1d",
    "cosine",
    "gelu",
    "grad_check",
    "gradients",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "make_rng",
    "no_grad",
    "relu",
    "save_checkpoint",
    "softmax_rows",
]
