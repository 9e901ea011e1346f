from .conv import CONV_METHODS, conv2d, resample2x, set_conv_method
from .gradcheck import check_gradients, gradient_errors, numerical_grad
from .optim import Adam, AdamHyper, AdamState, adam_step
from .tensor import (
    GraphConsumedError,
    Tensor,
    absolute,
    add,
    channel_slice,
    concat,
    concat_channels,
    div,
    elementwise,
    elu,
    get_default_dtype,
    gram,
    leaky_relu,
    mean_all,
    mul,
    ones,
    precision,
    relu,
    reshape,
    scale,
    set_default_dtype,
    sigmoid,
    softplus,
    square,
    sub,
    sum_all,
    tanh,
    tensor,
    zeros,
)
