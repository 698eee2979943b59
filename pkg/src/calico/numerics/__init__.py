"""Minimal float64 tensor engine with reverse-mode differentiation."""
from calico.numerics.checkpoint import load_checkpoint, save_checkpoint
from calico.numerics.gradcheck import GradCheckReport, grad_check
from calico.numerics.layers import (
    AttentionParams,
    LayerNorm,
    Linear,
    MLP,
    Parameter,
    ParameterSet,
    TransformerBlock,
    causal_mask,
    cross_attention,
)
from calico.numerics.tensor import (
    Tensor,
    concat,
    corrupt_backward,
    count_flops,
    gelu,
    index_add,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    no_grad,
    sigmoid,
    softmax,
    softplus,
)

__all__ = [
    "AttentionParams", "GradCheckReport", "LayerNorm", "Linear", "MLP", "Parameter", "ParameterSet",
    "Tensor", "TransformerBlock", "causal_mask", "concat", "corrupt_backward", "count_flops",
    "cross_attention", "gelu", "grad_check", "index_add", "layer_norm", "load_checkpoint",
    "linear", "log_softmax", "matmul", "no_grad", "save_checkpoint", "sigmoid", "softmax", "softplus",
]
