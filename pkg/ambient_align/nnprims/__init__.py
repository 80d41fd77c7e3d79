"""
Numeric substrate: kernels, parameters, optimizer and gradient oracle.
"""

from .params import ParamSet, init_uniform
from .layers import (
    linear, linear_backward, relu, relu_backward, l2_normalize, l2_normalize_backward,
    conv_nd, conv_nd_backward, conv1d, conv2d, conv3d,
    global_average_pool, global_average_pool_backward,
    gru_sequence, gru_sequence_backward, attention_pool, attention_pool_backward,
    GRU_PARAM_NAMES,
)
from .similarity import cosine_similarity_matrix, percentile, PERCENTILE_METHOD
from .optim import OptimizerState, adamw_update, ema_update
from .gradcheck import (
    finite_difference_gradient_check, GradCheckReport, GradCheckResult, GradientCheckError,
)
