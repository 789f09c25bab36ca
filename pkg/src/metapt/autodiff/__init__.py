from .optim import AdamWState, adamw_step, lr_schedule
from .tensor import (
    GradError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    cross_entropy,
    div,
    exp,
    finite_diff_grad,
    gather_rows,
    gelu,
    grad,
    grad_mode,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    slice_axis,
    softmax,
    sub,
    swap_last,
    take_along_last,
    tanh,
    transpose,
    tsum,
)
