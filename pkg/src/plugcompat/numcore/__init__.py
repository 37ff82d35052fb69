from plugcompat.numcore import container
from plugcompat.numcore.gradcheck import DiffGraph, GradCheckReport, finite_diff_check, numeric_gradient
from plugcompat.numcore.ops import (
    LN_EPS,
    cosine,
    cosine_logits,
    cross_entropy,
    l2_normalize,
    layer_norm,
    log_softmax,
    row_norms,
    softmax,
    softmax_rows,
)
from plugcompat.numcore.tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    embedding,
    exp,
    gelu,
    log,
    matmul,
    mean,
    relu,
    reshape,
    sqrt,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "DiffGraph",
    "GradCheckReport",
    "LN_EPS",
    "Tensor",
    "add",
    "as_tensor",
    "broadcast_to",
    "concat",
    "container",
    "cosine",
    "cosine_logits",
    "cross_entropy",
    "embedding",
    "exp",
    "finite_diff_check",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "numeric_gradient",
    "relu",
    "reshape",
    "row_norms",
    "softmax",
    "softmax_rows",
    "sqrt",
    "tanh",
    "transpose",
    "tsum",
]
