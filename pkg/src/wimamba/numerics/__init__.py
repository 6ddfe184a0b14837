from .gradcheck import finite_difference_gradient, max_relative_error
from .instrument import count_macs, track_allocations
from .tensor import (
    DimensionError,
    NumericError,
    Tensor,
    add,
    as_tensor,
    check_finite,
    concat,
    conv1d_depthwise,
    cross_entropy,
    default_dtype,
    elementwise,
    exp,
    flip,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    linear,
    log_softmax,
    make_result,
    matmul,
    mean,
    mse,
    mul,
    neg,
    no_grad,
    parameter,
    reshape,
    rms_normalize,
    set_default_dtype,
    sigmoid,
    silu,
    softmax,
    softplus,
    square,
    sub,
    take_rows,
    transpose,
    tsum,
)
from .module import Linear, Module
